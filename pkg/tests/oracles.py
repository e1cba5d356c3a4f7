"""Independent reference implementations used only by the test suite.

Everything here is deliberately written against the math, not against the
package internals: naive loops, power iteration, scalar arithmetic.  If an
oracle and the library disagree, the library is wrong.
"""

from __future__ import annotations

import math

import numpy as np


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop float64 matrix product, rounded to float32 at the end."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out.astype(np.float32)


def naive_softmax_row(row, keep=None):
    """Direct exp/sum softmax of one row with optional keep mask."""
    idx = range(len(row)) if keep is None else [i for i in range(len(row)) if keep[i]]
    mx = max(float(row[i]) for i in idx)
    exps = {i: math.exp(float(row[i]) - mx) for i in idx}
    z = sum(exps.values())
    return [exps.get(i, 0.0) / z for i in range(len(row))]


def naive_cosine(a, b) -> float:
    num = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return num / (na * nb)


def gram_eigenvalues(m: np.ndarray, n_values: int, iters: int = 5000) -> np.ndarray:
    """Leading eigenvalues of m.T @ m by power iteration with deflation.

    Returns sqrt of the eigenvalues, i.e. the singular values of m, in
    descending order.  Pure power iteration: independent of any Jacobi code.
    """
    g = m.astype(np.float64).T @ m.astype(np.float64)
    d = g.shape[0]
    rng = np.random.default_rng(1234)
    found_vecs: list[np.ndarray] = []
    found_vals: list[float] = []
    work = g.copy()
    for _ in range(n_values):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = work @ v
            nw = np.linalg.norm(w)
            if nw < 1e-300:
                lam = 0.0
                break
            v_new = w / nw
            lam = float(v_new @ work @ v_new)
            if np.linalg.norm(v_new - v) < 1e-14 or np.linalg.norm(v_new + v) < 1e-14:
                v = v_new
                break
            v = v_new
        found_vals.append(max(lam, 0.0))
        found_vecs.append(v)
        work = work - lam * np.outer(v, v)
    vals = np.sqrt(np.clip(np.array(found_vals), 0.0, None))
    return np.sort(vals)[::-1]


def random_orthonormal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Random (d, k) matrix with orthonormal columns, via Gram-Schmidt."""
    cols = []
    while len(cols) < k:
        w = rng.standard_normal(d)
        for b in cols:
            w -= (w @ b) * b
        n = np.linalg.norm(w)
        if n > 1e-6:
            cols.append(w / n)
    return np.stack(cols, axis=1)


def scalar_forward_logits(model, tokens):
    """Step-by-step scalar re-implementation of the model forward pass.

    Pure Python loops and math.* only; no numpy vector ops on the hot path.
    Returns the logits at every position as a list of lists.
    """
    cfg = model.config
    D, H = cfg.dim, cfg.n_heads
    dh = D // H
    eps = 1e-6

    def rms(vec):
        return math.sqrt(sum(x * x for x in vec) / len(vec) + eps)

    def rmsnorm(vec, gain):
        r = rms(vec)
        return [x / r * float(g) for x, g in zip(vec, gain)]

    def matvec_rows(vec, w):
        # row-vector times matrix: out[j] = sum_i vec[i] * w[i][j]
        rows, cols = w.shape
        return [
            sum(float(vec[i]) * float(w[i, j]) for i in range(rows))
            for j in range(cols)
        ]

    def gelu1(u):
        return 0.5 * u * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (u + 0.044715 * u**3)))

    T = len(tokens)
    x = []
    for pos, tok in enumerate(tokens):
        x.append(
            [float(model.embed[tok, j]) + float(model.pos_embed[pos, j]) for j in range(D)]
        )

    for lw in model.layers:
        normed = [rmsnorm(row, lw.attn_norm_gain) for row in x]
        q = [matvec_rows(row, lw.w_q) for row in normed]
        k = [matvec_rows(row, lw.w_k) for row in normed]
        v = [matvec_rows(row, lw.w_v) for row in normed]
        ctx = [[0.0] * D for _ in range(T)]
        for h in range(H):
            lo = h * dh
            for i in range(T):
                scores = []
                for j in range(i + 1):
                    s = sum(q[i][lo + a] * k[j][lo + a] for a in range(dh))
                    scores.append(s / math.sqrt(dh))
                mx = max(scores)
                exps = [math.exp(s - mx) for s in scores]
                z = sum(exps)
                weights = [e / z for e in exps]
                for a in range(dh):
                    ctx[i][lo + a] = sum(weights[j] * v[j][lo + a] for j in range(i + 1))
        attn = [matvec_rows(row, lw.w_o) for row in ctx]
        x2 = [[x[i][j] + attn[i][j] for j in range(D)] for i in range(T)]
        normed2 = [rmsnorm(row, lw.mlp_norm_gain) for row in x2]
        up = [[gelu1(u) for u in matvec_rows(row, lw.w_up)] for row in normed2]
        mlp = [matvec_rows(row, lw.w_down) for row in up]
        x = [[x2[i][j] + mlp[i][j] for j in range(D)] for i in range(T)]

    out = []
    for row in x:
        normed = rmsnorm(row, model.out_norm_gain)
        out.append(matvec_rows(normed, model.unembed))
    return out
