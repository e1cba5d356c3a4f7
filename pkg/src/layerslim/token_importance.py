"""Attention-received token importance scores.

A token matters to the extent other tokens attend to it.  For each position
we average the post-softmax attention it receives, head-averaged first, and
restricted to causally allowed query positions:

    intra  - attention received from queries of the same modality
    cross  - attention received by visual tokens from text queries

Visual tokens combine both scores with equal weight; text tokens receive no
cross score (nothing later in the stream is non-text), so their combined
score is the intra score alone rather than being halved against a zero.
Top-p selection keeps the ceil(p * n) highest-scoring positions, never fewer
than one, with ties resolved toward the lower position index.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import ParameterError
from .model import ForwardTrace, TokenStream
from .validation import check_index

DEFAULT_KEEP_RATIO = 0.10


@dataclass(frozen=True)
class TokenScoreSheet:
    layer: int
    intra: np.ndarray     # (T,) float64 in [0, 1]
    cross: np.ndarray     # (T,) float64 in [0, 1]; zero at text positions
    combined: np.ndarray  # (T,) float64 in [0, 1]
    keep: np.ndarray      # (T,) bool
    p: float

    @property
    def keep_count(self) -> int:
        return int(self.keep.sum())


def select_top_p(scores: np.ndarray, p: float) -> np.ndarray:
    """Boolean keep mask over the max(1, ceil(p * n)) highest scores."""
    if not (0.0 < p <= 1.0):
        raise ParameterError(f"keep ratio p={p} outside (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    count = max(1, ceil(p * n))
    # stable sort on negated scores: equal scores keep ascending position
    order = np.argsort(-scores, kind="stable")
    keep = np.zeros(n, dtype=bool)
    keep[order[:count]] = True
    return keep


def score_tokens(
    trace: ForwardTrace,
    stream: TokenStream,
    layer: int,
    p: float = DEFAULT_KEEP_RATIO,
) -> TokenScoreSheet:
    """Score every position of `stream` from the captured attention at `layer`."""
    trace.require_capture()
    layer = check_index(layer, len(trace.attention), "layer")
    maps = trace.attention[layer].astype(np.float64)
    T = len(stream)
    if maps.shape[1:] != (T, T):
        raise ParameterError(
            f"attention maps cover {maps.shape[1]} positions, stream has {T}"
        )
    a = maps.mean(axis=0)  # head mean first, then column statistics
    vis = len(stream.visual)

    intra = np.zeros(T)
    cross = np.zeros(T)
    combined = np.zeros(T)
    for i in range(T):
        if i < vis:
            # visual key: same-modality queries are visual positions >= i
            intra[i] = a[i:vis, i].mean()
            # every text query sits after every visual key, all allowed
            cross[i] = a[vis:, i].mean()
            combined[i] = 0.5 * (intra[i] + cross[i])
        else:
            intra[i] = a[i:, i].mean()
            combined[i] = intra[i]
    keep = select_top_p(combined, p)
    return TokenScoreSheet(
        layer=layer, intra=intra, cross=cross, combined=combined, keep=keep, p=float(p)
    )


def score_records(sheet: TokenScoreSheet, stream: TokenStream, sample_id: str | None = None):
    """Flatten a score sheet into JSON-ready per-position records."""
    sid = stream.sample_id if sample_id is None else sample_id
    vis = len(stream.visual)
    out = []
    for pos in range(len(stream)):
        out.append(
            {
                "sample": sid,
                "layer": sheet.layer,
                "position": pos,
                "modality": "visual" if pos < vis else "text",
                "score_intra": float(sheet.intra[pos]),
                "score_cross": float(sheet.cross[pos]),
                "kept": bool(sheet.keep[pos]),
            }
        )
    return out
