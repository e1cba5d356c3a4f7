"""A small pre-norm residual decoder-only transformer over a bimodal stream.

Every sample is a visual token prefix followed by a text suffix; both live in
one vocabulary and attention is causal, so cross-modal attention is just the
text-query/visual-key block of ordinary self-attention.  Weights are stored
float32; all forward arithmetic runs in float64.

The residual stream is exposed for analysis: with capture enabled the forward
pass records x(0)..x(L), per-head post-softmax attention maps and both
per-layer contributions, so x(l+1) - x(l) - attn(l) - mlp(l) == 0 can be
re-checked from the trace alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import archive
from .errors import ArchiveError, ParameterError, StateError

RMS_EPS = 1e-6
INIT_STD = 0.02

# vocabulary convention shared by tasks and evaluation: the first two ids are
# the answer tokens, id equals class label
ANSWER_TOKENS = (0, 1)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int
    n_layers: int
    n_heads: int
    mlp_hidden: int
    max_seq: int
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ParameterError("vocab_size must be at least 4")
        if self.dim < 1 or self.mlp_hidden < 1 or self.max_seq < 2:
            raise ParameterError("dim, mlp_hidden and max_seq must be positive")
        if self.n_layers < 1:
            raise ParameterError("n_layers must be >= 1")
        if self.n_heads < 1 or self.dim % self.n_heads != 0:
            raise ParameterError(
                f"dim={self.dim} must be divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "mlp_hidden": self.mlp_hidden,
            "max_seq": self.max_seq,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        return ModelConfig(**{k: int(v) for k, v in obj.items()})


@dataclass(frozen=True)
class TokenStream:
    """One sample: visual prefix strictly before the text suffix."""

    visual: tuple[int, ...]
    text: tuple[int, ...]
    label: int | None = None
    sample_id: str = ""

    def __post_init__(self):
        if len(self.visual) < 1 or len(self.text) < 1:
            raise ParameterError("stream needs at least one visual and one text token")
        for t in self.visual + self.text:
            if int(t) != t or t < 0:
                raise ParameterError(f"token ids must be non-negative ints, got {t!r}")
        object.__setattr__(self, "visual", tuple(int(t) for t in self.visual))
        object.__setattr__(self, "text", tuple(int(t) for t in self.text))

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.visual + self.text

    def __len__(self) -> int:
        return len(self.visual) + len(self.text)

    @property
    def visual_positions(self) -> np.ndarray:
        return np.arange(len(self.visual))

    @property
    def text_positions(self) -> np.ndarray:
        return np.arange(len(self.visual), len(self))

    def modality_mask(self) -> np.ndarray:
        """Boolean array, True where the position belongs to the visual prefix."""
        m = np.zeros(len(self), dtype=bool)
        m[: len(self.visual)] = True
        return m


@dataclass
class LayerWeights:
    attn_norm_gain: np.ndarray  # (D,)
    w_q: np.ndarray             # (D, D)
    w_k: np.ndarray             # (D, D)
    w_v: np.ndarray             # (D, D)
    w_o: np.ndarray             # (D, D)
    mlp_norm_gain: np.ndarray   # (D,)
    w_up: np.ndarray            # (D, mlp_hidden)
    w_down: np.ndarray          # (mlp_hidden, D)

    FIELDS = (
        "attn_norm_gain",
        "w_q",
        "w_k",
        "w_v",
        "w_o",
        "mlp_norm_gain",
        "w_up",
        "w_down",
    )

    def copy(self) -> "LayerWeights":
        return LayerWeights(**{f: getattr(self, f).copy() for f in self.FIELDS})


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray          # (vocab, D)
    pos_embed: np.ndarray      # (max_seq, D)
    layers: list[LayerWeights]
    out_norm_gain: np.ndarray  # (D,)
    unembed: np.ndarray        # (D, vocab)

    def copy(self) -> "Model":
        return Model(
            config=self.config,
            embed=self.embed.copy(),
            pos_embed=self.pos_embed.copy(),
            layers=[lw.copy() for lw in self.layers],
            out_norm_gain=self.out_norm_gain.copy(),
            unembed=self.unembed.copy(),
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_json(), sort_keys=True).encode())
        for name, arr in named_tensors(self):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class PruneProvenance:
    """Record of a pruning operation, serialized into the model archive."""

    pruned: tuple[int, ...]
    source_layers: tuple[int, ...]      # original indices of surviving layers
    pairing: dict                       # pruned index -> retained index
    rank: int                           # compensation rank k (0 = none)
    residuals: dict                     # pruned index -> relative residual
    skipped: tuple[int, ...] = ()       # pairs skipped as degenerate
    policy: str = ""
    ratio: float = 0.0

    def to_json(self) -> dict:
        return {
            "pruned": list(self.pruned),
            "source_layers": list(self.source_layers),
            "pairing": {str(k): int(v) for k, v in self.pairing.items()},
            "rank": self.rank,
            "residuals": {str(k): float(v) for k, v in self.residuals.items()},
            "skipped": list(self.skipped),
            "policy": self.policy,
            "ratio": self.ratio,
        }

    @staticmethod
    def from_json(obj: dict) -> "PruneProvenance":
        return PruneProvenance(
            pruned=tuple(int(x) for x in obj["pruned"]),
            source_layers=tuple(int(x) for x in obj["source_layers"]),
            pairing={int(k): int(v) for k, v in obj["pairing"].items()},
            rank=int(obj["rank"]),
            residuals={int(k): float(v) for k, v in obj["residuals"].items()},
            skipped=tuple(int(x) for x in obj.get("skipped", ())),
            policy=str(obj.get("policy", "")),
            ratio=float(obj.get("ratio", 0.0)),
        )


@dataclass
class PrunedModel:
    """A model with layers removed, plus the provenance of the surgery."""

    model: Model
    provenance: PruneProvenance

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def digest(self) -> str:
        return self.model.digest()


def as_model(m) -> Model:
    """Accept either a Model or a PrunedModel wherever a forward pass runs."""
    return m.model if isinstance(m, PrunedModel) else m


@dataclass
class ForwardTrace:
    """Outputs of one forward pass; analysis fields only exist with capture."""

    logits: np.ndarray                       # (T, vocab) float32
    hidden: list[np.ndarray] | None = None   # length L+1, each (T, D) float32
    attention: list[np.ndarray] | None = None  # length L, each (H, T, T) float32
    attn_contrib: list[np.ndarray] | None = None
    mlp_contrib: list[np.ndarray] | None = None

    def require_capture(self):
        if self.hidden is None or self.attention is None:
            raise StateError("forward pass was run without capture=True")


def init_model(config: ModelConfig) -> Model:
    """Fresh model with normal(0, 0.02) weights; deterministic in the seed."""
    if config.n_layers < 2:
        raise ParameterError("a trainable model needs at least 2 layers")
    rng = np.random.default_rng(config.seed)
    d, hm = config.dim, config.mlp_hidden

    def draw(*shape):
        return (rng.standard_normal(shape) * INIT_STD).astype(np.float32)

    embed = draw(config.vocab_size, d)
    pos = draw(config.max_seq, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm_gain=np.ones(d, dtype=np.float32),
                w_q=draw(d, d),
                w_k=draw(d, d),
                w_v=draw(d, d),
                w_o=draw(d, d),
                mlp_norm_gain=np.ones(d, dtype=np.float32),
                w_up=draw(d, hm),
                w_down=draw(hm, d),
            )
        )
    unembed = draw(d, config.vocab_size)
    return Model(
        config=config,
        embed=embed,
        pos_embed=pos,
        layers=layers,
        out_norm_gain=np.ones(d, dtype=np.float32),
        unembed=unembed,
    )


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)


def gelu(u: np.ndarray) -> np.ndarray:
    # tanh form; smooth everywhere, which keeps finite-difference checks clean
    return 0.5 * u * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (u + 0.044715 * u**3)))


def _softmax_last(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def weights_f64(model: Model) -> dict:
    """One-time float64 view of the weights for a run of forward passes."""
    return {
        "embed": model.embed.astype(np.float64),
        "pos": model.pos_embed.astype(np.float64),
        "layers": [
            {f: getattr(lw, f).astype(np.float64) for f in LayerWeights.FIELDS}
            for lw in model.layers
        ],
        "out_gain": model.out_norm_gain.astype(np.float64),
        "unembed": model.unembed.astype(np.float64),
    }


def _check_ids(cfg: ModelConfig, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ParameterError("ids must be a (batch, seq) array")
    if ids.shape[1] > cfg.max_seq:
        raise ParameterError(
            f"sequence length {ids.shape[1]} exceeds max_seq {cfg.max_seq}"
        )
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ParameterError("token id out of vocabulary range")
    return ids.astype(np.int64)


def forward_ids(cfg: ModelConfig, w: dict, ids: np.ndarray, keep: str = "logits") -> dict:
    """Batched forward pass in float64.

    keep='logits' retains only the logits; keep='trace' additionally retains
    float32 snapshots of the residual stream, attention maps and per-layer
    contributions; keep='train' retains every float64 intermediate needed for
    backpropagation.
    """
    ids = _check_ids(cfg, ids)
    B, T = ids.shape
    H, dh = cfg.n_heads, cfg.head_dim
    x = w["embed"][ids] + w["pos"][np.newaxis, :T, :]
    causal = np.triu(np.full((T, T), -np.inf), k=1)  # disallow keys after query

    out: dict = {"ids": ids}
    if keep == "trace":
        out["hidden"] = [x.astype(np.float32)]
        out["attention"] = []
        out["attn_contrib"] = []
        out["mlp_contrib"] = []
    if keep == "train":
        out["x0"] = x
        out["acts"] = []

    for lw in w["layers"]:
        r1 = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
        n1 = x / r1
        a_in = n1 * lw["attn_norm_gain"]
        q = (a_in @ lw["w_q"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a_in @ lw["w_k"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a_in @ lw["w_v"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + causal
        a = _softmax_last(s)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.dim)
        attn = ctx @ lw["w_o"]
        x2 = x + attn

        r2 = np.sqrt(np.mean(x2 * x2, axis=-1, keepdims=True) + RMS_EPS)
        n2 = x2 / r2
        m_in = n2 * lw["mlp_norm_gain"]
        u = m_in @ lw["w_up"]
        hact = gelu(u)
        mlp = hact @ lw["w_down"]
        x3 = x2 + mlp

        if keep == "trace":
            out["hidden"].append(x3.astype(np.float32))
            out["attention"].append(a.astype(np.float32))
            out["attn_contrib"].append(attn.astype(np.float32))
            out["mlp_contrib"].append(mlp.astype(np.float32))
        if keep == "train":
            out["acts"].append(
                {
                    "x": x, "r1": r1, "n1": n1, "a_in": a_in,
                    "q": q, "k": k, "v": v, "a": a, "ctx": ctx,
                    "x2": x2, "r2": r2, "n2": n2, "m_in": m_in,
                    "u": u, "hact": hact,
                }
            )
        x = x3

    rf = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    nf = x / rf
    logits = (nf * w["out_gain"]) @ w["unembed"]
    out["logits"] = logits
    if keep == "train":
        out["xf"] = x
        out["rf"] = rf
        out["nf"] = nf
    return out


def forward(model, stream: TokenStream, capture: bool = False) -> ForwardTrace:
    """Run one sample through the model.

    With capture=True the trace carries the full residual stream x(0)..x(L),
    post-softmax attention maps per layer and head, and both per-layer
    contribution terms.
    """
    m = as_model(model)
    w = weights_f64(m)
    ids = np.array([stream.tokens], dtype=np.int64)
    res = forward_ids(m.config, w, ids, keep="trace" if capture else "logits")
    logits = res["logits"][0].astype(np.float32)
    if not capture:
        return ForwardTrace(logits=logits)
    return ForwardTrace(
        logits=logits,
        hidden=[h[0] for h in res["hidden"]],
        attention=[a[0] for a in res["attention"]],
        attn_contrib=[c[0] for c in res["attn_contrib"]],
        mlp_contrib=[c[0] for c in res["mlp_contrib"]],
    )


def named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    out = [("embed", model.embed), ("pos_embed", model.pos_embed)]
    for i, lw in enumerate(model.layers):
        for f in LayerWeights.FIELDS:
            out.append((f"layers.{i}.{f}", getattr(lw, f)))
    out.append(("out_norm_gain", model.out_norm_gain))
    out.append(("unembed", model.unembed))
    return out


def save_model(model, path: str | Path) -> None:
    """Serialize a Model or PrunedModel to a tensor archive."""
    m = as_model(model)
    meta = {"format": "layerslim-model", "config": m.config.to_json()}
    if isinstance(model, PrunedModel):
        meta["provenance"] = model.provenance.to_json()
    save = dict(named_tensors(m))
    archive.save_tensors(path, meta, save)


def load_model(path: str | Path):
    """Load a Model (or PrunedModel, when provenance is present) from disk."""
    meta, tensors = archive.load_tensors(path)
    if not isinstance(meta, dict) or meta.get("format") != "layerslim-model":
        raise ArchiveError(f"{path}: not a model archive")
    cfg = ModelConfig.from_json(meta["config"])
    expect = {}
    d, hm = cfg.dim, cfg.mlp_hidden
    expect["embed"] = (cfg.vocab_size, d)
    expect["pos_embed"] = (cfg.max_seq, d)
    for i in range(cfg.n_layers):
        base = f"layers.{i}."
        expect[base + "attn_norm_gain"] = (d,)
        expect[base + "w_q"] = (d, d)
        expect[base + "w_k"] = (d, d)
        expect[base + "w_v"] = (d, d)
        expect[base + "w_o"] = (d, d)
        expect[base + "mlp_norm_gain"] = (d,)
        expect[base + "w_up"] = (d, hm)
        expect[base + "w_down"] = (hm, d)
    expect["out_norm_gain"] = (d,)
    expect["unembed"] = (d, cfg.vocab_size)
    if set(tensors) != set(expect):
        missing = sorted(set(expect) - set(tensors))
        extra = sorted(set(tensors) - set(expect))
        raise ArchiveError(f"tensor set mismatch: missing={missing} extra={extra}")
    for name, shape in expect.items():
        if tensors[name].shape != shape:
            raise ArchiveError(
                f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
    layers = []
    for i in range(cfg.n_layers):
        base = f"layers.{i}."
        layers.append(
            LayerWeights(**{f: tensors[base + f] for f in LayerWeights.FIELDS})
        )
    model = Model(
        config=cfg,
        embed=tensors["embed"],
        pos_embed=tensors["pos_embed"],
        layers=layers,
        out_norm_gain=tensors["out_norm_gain"],
        unembed=tensors["unembed"],
    )
    if "provenance" in meta:
        return PrunedModel(model=model, provenance=PruneProvenance.from_json(meta["provenance"]))
    return model
