"""Calibration corpus handling and per-token feature extraction.

Corpus files are line-delimited JSON records:

    {"id": "...", "visual": [int, ...], "text": [int, ...], "label": 0}

Loading shuffles with a fixed seed and keeps the first `limit` samples, so a
given (file, seed, limit) always yields the same corpus.  Feature extraction
stacks residual-stream vectors of kept token positions into (N, D) matrices,
one per requested layer, with per-row provenance for later alignment checks.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorpusError, ParameterError
from .model import TokenStream, as_model, forward_ids, weights_f64

DEFAULT_CALIB_SAMPLES = 256


@dataclass(frozen=True)
class CalibrationCorpus:
    samples: tuple[TokenStream, ...]
    seed: int
    source: str = ""

    def __post_init__(self):
        if len(self.samples) == 0:
            raise CorpusError("corpus has no samples")

    def __len__(self) -> int:
        return len(self.samples)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.samples:
            h.update(
                json.dumps(
                    [s.sample_id, list(s.visual), list(s.text), s.label]
                ).encode()
            )
        return h.hexdigest()[:16]


def save_corpus(samples, path: str | Path) -> None:
    """Write samples as line-delimited JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {
                "id": s.sample_id,
                "visual": list(s.visual),
                "text": list(s.text),
                "label": s.label,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(
    path: str | Path, limit: int | None = DEFAULT_CALIB_SAMPLES, seed: int = 0
) -> CalibrationCorpus:
    """Load, validate, seeded-shuffle, and truncate a corpus file.

    A malformed line raises CorpusError naming the line number.  limit=None
    keeps every sample; limit=0 is rejected because an empty calibration set
    can never drive the pipeline.
    """
    if limit is not None and limit < 1:
        raise CorpusError("limit must be at least 1")
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                stream = TokenStream(
                    visual=tuple(rec["visual"]),
                    text=tuple(rec["text"]),
                    label=None if rec.get("label") is None else int(rec["label"]),
                    sample_id=str(rec["id"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}: bad record on line {ln}: {exc}") from exc
            samples.append(stream)
    if not samples:
        raise CorpusError(f"{path}: corpus file is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    cap = len(samples) if limit is None else min(limit, len(samples))
    picked = tuple(samples[i] for i in order[:cap])
    return CalibrationCorpus(samples=picked, seed=seed, source=str(path))


@dataclass(frozen=True)
class FeatureMatrix:
    """Residual-stream vectors for one stream index, stacked in corpus order.

    `layer` indexes the stream state x(layer), 0 = embeddings, L = final
    output.  Provenance rows are (sample_id, position, modality) and align
    one-to-one with rows of `values`.
    """

    layer: int
    values: np.ndarray  # (N, D) float32
    provenance: tuple[tuple[str, int, str], ...]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.provenance):
            raise ParameterError("feature rows and provenance must align")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


def batched_traces(model, corpus: CalibrationCorpus, keep: str = "trace", batch_size: int = 64):
    """Yield (sample_index, per-sample trace dict) in corpus order.

    Samples are grouped by length so each group runs as one batched forward
    pass; results are re-emitted in corpus order, so downstream reductions
    are independent of the grouping.
    """
    m = as_model(model)
    w = weights_f64(m)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(corpus.samples):
        by_len.setdefault(len(s), []).append(i)
    results: dict[int, dict] = {}
    for length in sorted(by_len):
        idxs = by_len[length]
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            ids = np.array([corpus.samples[i].tokens for i in chunk], dtype=np.int64)
            res = forward_ids(m.config, w, ids, keep=keep)
            for bi, i in enumerate(chunk):
                per = {"logits": res["logits"][bi]}
                if keep == "trace":
                    per["hidden"] = [h[bi] for h in res["hidden"]]
                    per["attention"] = [a[bi] for a in res["attention"]]
                results[i] = per
    for i in range(len(corpus.samples)):
        yield i, results[i]


def extract_features(
    model,
    corpus: CalibrationCorpus,
    layer_set,
    token_masks: list[np.ndarray] | None = None,
    pool: str = "none",
) -> dict[int, FeatureMatrix]:
    """Stack residual-stream vectors for each requested stream index.

    token_masks, when given, holds one boolean mask per corpus sample naming
    the positions to keep (default: all positions).  pool='mean' collapses
    each sample to its mean kept vector (provenance position becomes -1).
    Rows are bit-exact copies of the captured forward-trace activations.
    """
    m = as_model(model)
    L = m.config.n_layers
    layer_set = sorted(set(int(l) for l in layer_set))
    if not layer_set:
        raise ParameterError("layer_set must be non-empty")
    for l in layer_set:
        if not (0 <= l <= L):
            raise ParameterError(f"layer {l} outside stream range [0, {L}]")
    if pool not in ("none", "mean"):
        raise ParameterError(f"unknown pooling mode {pool!r}")
    if token_masks is not None and len(token_masks) != len(corpus):
        raise ParameterError("need exactly one token mask per corpus sample")

    rows: dict[int, list[np.ndarray]] = {l: [] for l in layer_set}
    prov: list[tuple[str, int, str]] = []
    for i, trace in batched_traces(model, corpus, keep="trace"):
        s = corpus.samples[i]
        if token_masks is None:
            keep_pos = np.arange(len(s))
        else:
            mask = np.asarray(token_masks[i], dtype=bool)
            if mask.shape != (len(s),):
                raise ParameterError(f"token mask {i} has wrong length")
            keep_pos = np.flatnonzero(mask)
        if keep_pos.size == 0:
            continue
        vis = len(s.visual)
        if pool == "mean":
            prov.append((s.sample_id, -1, "pooled"))
            for l in layer_set:
                rows[l].append(trace["hidden"][l][keep_pos].mean(axis=0, keepdims=True))
        else:
            for p in keep_pos:
                prov.append((s.sample_id, int(p), "visual" if p < vis else "text"))
            for l in layer_set:
                rows[l].append(trace["hidden"][l][keep_pos])
    if not prov:
        raise CorpusError("token masks keep zero positions in every sample")
    provenance = tuple(prov)
    return {
        l: FeatureMatrix(
            layer=l,
            values=np.ascontiguousarray(np.vstack(rows[l]), dtype=np.float32),
            provenance=provenance,
        )
        for l in layer_set
    }
