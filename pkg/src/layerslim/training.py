"""Analytic-gradient trainer for the toy model.

Backpropagation is written out by hand against the forward pass in model.py
(keep='train' retains every intermediate).  The optimizer is Adam with global
gradient-norm clipping; all optimizer math runs in float64 and weights are
rounded back to their float32 storage after each step, so lr=0 is an exact
no-op.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError
from .model import (
    Model,
    RMS_EPS,
    TokenStream,
    forward_ids,
    weights_f64,
)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 1.0


def _streams_to_ids(streams: list[TokenStream]) -> tuple[np.ndarray, np.ndarray]:
    lens = {len(s) for s in streams}
    if len(lens) != 1:
        raise ParameterError("training batch must contain equal-length streams")
    ids = np.array([s.tokens for s in streams], dtype=np.int64)
    labels = []
    for s in streams:
        if s.label is None:
            raise ParameterError(f"sample {s.sample_id!r} has no label")
        labels.append(int(s.label))
    return ids, np.array(labels, dtype=np.int64)


def _gelu_grad(u: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    inner = c * (u + 0.044715 * u**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * u**2)


def _rms_backward(dy: np.ndarray, y: np.ndarray, r: np.ndarray) -> np.ndarray:
    # y = x / r with r = sqrt(mean(x^2) + eps);  dx = (dy - y*mean(dy*y)) / r
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / r


def loss_and_gradients(model: Model, streams: list[TokenStream]) -> tuple[float, dict]:
    """Mean cross-entropy at the readout position, plus gradients.

    Gradients come back as a dict mirroring weights_f64: 'embed', 'pos',
    'layers' (list of per-tensor dicts), 'out_gain', 'unembed'.
    """
    cfg = model.config
    w = weights_f64(model)
    ids, labels = _streams_to_ids(streams)
    B, T = ids.shape
    H, dh, D = cfg.n_heads, cfg.head_dim, cfg.dim

    res = forward_ids(cfg, w, ids, keep="train")
    logits = res["logits"][:, -1, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    nll = -np.log(probs[np.arange(B), labels] + 1e-300)
    loss = float(nll.mean())

    grads = {
        "embed": np.zeros_like(w["embed"]),
        "pos": np.zeros_like(w["pos"]),
        "layers": [
            {name: np.zeros_like(t) for name, t in lw.items()} for lw in w["layers"]
        ],
        "out_gain": np.zeros_like(w["out_gain"]),
        "unembed": np.zeros_like(w["unembed"]),
    }

    # head: final-position cross entropy through the output norm
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B                                        # (B, V)
    nf_last = res["nf"][:, -1, :]
    scaled = nf_last * w["out_gain"]
    grads["unembed"] += scaled.T @ dlogits
    dscaled = dlogits @ w["unembed"].T
    grads["out_gain"] += (dscaled * nf_last).sum(axis=0)
    dnf_last = dscaled * w["out_gain"]
    dx = np.zeros_like(res["xf"])
    dx[:, -1, :] = _rms_backward(
        dnf_last[:, np.newaxis, :], res["nf"][:, -1:, :], res["rf"][:, -1:, :]
    )[:, 0, :]

    for li in range(cfg.n_layers - 1, -1, -1):
        act = res["acts"][li]
        lw = w["layers"][li]
        g = grads["layers"][li]

        # mlp half: x3 = x2 + gelu(m_in @ w_up) @ w_down
        dmlp = dx
        g["w_down"] += np.einsum("bth,btd->hd", act["hact"], dmlp)
        dhact = dmlp @ lw["w_down"].T
        du = dhact * _gelu_grad(act["u"])
        g["w_up"] += np.einsum("btd,bth->dh", act["m_in"], du)
        dm_in = du @ lw["w_up"].T
        g["mlp_norm_gain"] += (dm_in * act["n2"]).sum(axis=(0, 1))
        dn2 = dm_in * lw["mlp_norm_gain"]
        dx2 = dx + _rms_backward(dn2, act["n2"], act["r2"])

        # attention half: x2 = x + merge(softmax(qk/s) v) @ w_o
        dattn = dx2
        g["w_o"] += np.einsum("btd,bte->de", act["ctx"], dattn)
        dctx = (dattn @ lw["w_o"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        da = dctx @ act["v"].transpose(0, 1, 3, 2)      # (B, H, T, T)
        dv = act["a"].transpose(0, 1, 3, 2) @ dctx      # (B, H, T, dh)
        # softmax backward; rows of `a` are zero beyond the causal frontier,
        # so masked entries contribute nothing
        ds = act["a"] * (da - (da * act["a"]).sum(axis=-1, keepdims=True))
        ds /= np.sqrt(dh)
        dq = ds @ act["k"]
        dk = ds.transpose(0, 1, 3, 2) @ act["q"]

        def merge(h):
            return h.transpose(0, 2, 1, 3).reshape(B, T, D)

        dq_f, dk_f, dv_f = merge(dq), merge(dk), merge(dv)
        g["w_q"] += np.einsum("btd,bte->de", act["a_in"], dq_f)
        g["w_k"] += np.einsum("btd,bte->de", act["a_in"], dk_f)
        g["w_v"] += np.einsum("btd,bte->de", act["a_in"], dv_f)
        da_in = dq_f @ lw["w_q"].T + dk_f @ lw["w_k"].T + dv_f @ lw["w_v"].T
        g["attn_norm_gain"] += (da_in * act["n1"]).sum(axis=(0, 1))
        dn1 = da_in * lw["attn_norm_gain"]
        dx = dx2 + _rms_backward(dn1, act["n1"], act["r1"])

    np.add.at(grads["embed"], ids, dx)
    grads["pos"][:T] += dx.sum(axis=0)
    return loss, grads


def batch_loss(model: Model, streams: list[TokenStream]) -> float:
    """Mean readout cross-entropy without gradients."""
    cfg = model.config
    w = weights_f64(model)
    ids, labels = _streams_to_ids(streams)
    logits = forward_ids(cfg, w, ids, keep="logits")["logits"][:, -1, :]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return float((logz - shifted[np.arange(len(labels)), labels]).mean())


def _flatten_like(w: dict):
    yield "embed", w["embed"]
    yield "pos", w["pos"]
    for i, lw in enumerate(w["layers"]):
        for name, t in lw.items():
            yield f"layers.{i}.{name}", t
    yield "out_gain", w["out_gain"]
    yield "unembed", w["unembed"]


def _clip_gradients(grads: dict) -> float:
    total = 0.0
    for _, g in _flatten_like(grads):
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > CLIP_NORM:
        scale = CLIP_NORM / norm
        for _, g in _flatten_like(grads):
            g *= scale
    return norm


def train_toy(
    model: Model,
    task,
    steps: int,
    lr: float,
    batch_size: int = 32,
    n_train: int = 4096,
    seed: int = 0,
) -> Model:
    """Train a copy of `model` on `task` and return it.

    Adam on float64 master weights with the result rounded back into float32
    storage each step.  Divergence (non-finite loss) raises NumericError.
    """
    if steps < 0 or batch_size < 1:
        raise ParameterError("steps must be >= 0 and batch_size >= 1")
    out = model.copy()
    pool = task.generate(n_train, seed=seed)
    rng = np.random.default_rng(seed + 1)

    # float64 master weights; storage stays float32
    master = weights_f64(out)
    mom = {name: np.zeros_like(t) for name, t in _flatten_like(master)}
    vel = {name: np.zeros_like(t) for name, t in _flatten_like(master)}

    def write_back():
        out.embed = master["embed"].astype(np.float32)
        out.pos_embed = master["pos"].astype(np.float32)
        for i, lw in enumerate(master["layers"]):
            dst = out.layers[i]
            for name, t in lw.items():
                setattr(dst, name, t.astype(np.float32))
        out.out_norm_gain = master["out_gain"].astype(np.float32)
        out.unembed = master["unembed"].astype(np.float32)

    for step in range(steps):
        batch = [pool[int(i)] for i in rng.integers(0, len(pool), size=batch_size)]
        loss, grads = loss_and_gradients(out, batch)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged at step {step} (loss={loss})")
        _clip_gradients(grads)
        t = step + 1
        flat_g = dict(_flatten_like(grads))
        for name, m_t in _flatten_like(master):
            g = flat_g[name]
            mom[name] = ADAM_B1 * mom[name] + (1 - ADAM_B1) * g
            vel[name] = ADAM_B2 * vel[name] + (1 - ADAM_B2) * g * g
            mhat = mom[name] / (1 - ADAM_B1**t)
            vhat = vel[name] / (1 - ADAM_B2**t)
            m_t -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        write_back()
        # keep the master in sync with quantized storage so runs are
        # reproducible from the stored float32 weights alone
        master = weights_f64(out)
    return out
