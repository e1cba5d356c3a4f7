"""Evaluation harness: accuracy, throughput, seed studies, and gap reports.

Everything here treats models as black boxes behind the forward pass, so
original and pruned models evaluate through identical code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationCorpus, extract_features
from .compensation import naive_prune
from .errors import CorpusError, ParameterError
from .linalg import cosine_rows, thin_svd
from .localizer import check_window, random_plan
from .model import ANSWER_TOKENS, as_model, forward_ids, weights_f64

DEFAULT_EVAL_REPS = 3


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    n_samples: int
    samples_per_sec: float      # median over timing repetitions
    rep_rates: tuple            # every repetition's rate, for inspection

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "samples_per_sec": self.samples_per_sec,
            "rep_rates": list(self.rep_rates),
        }


def predict(model, streams, batch_size: int = 64) -> np.ndarray:
    """Greedy class choice: argmax over the answer tokens at the last position."""
    m = as_model(model)
    w = weights_f64(m)
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(streams):
        by_len.setdefault(len(s), []).append(i)
    preds = np.full(len(streams), -1, dtype=np.int64)
    for length in sorted(by_len):
        idxs = by_len[length]
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            ids = np.array([streams[i].tokens for i in chunk], dtype=np.int64)
            logits = forward_ids(m.config, w, ids, keep="logits")["logits"]
            answer = logits[:, -1, list(ANSWER_TOKENS)]
            preds[chunk] = np.argmax(answer, axis=1)
    return preds


def evaluate(model, streams, reps: int = DEFAULT_EVAL_REPS, batch_size: int = 64) -> EvalResult:
    """Accuracy plus median wall-clock throughput over `reps` timed passes."""
    if len(streams) == 0:
        raise CorpusError("nothing to evaluate")
    if reps < 1:
        raise ParameterError("need at least one timing repetition")
    labels = []
    for s in streams:
        if s.label is None:
            raise CorpusError(f"sample {s.sample_id!r} has no label")
        labels.append(s.label)
    labels = np.array(labels)

    preds = predict(model, streams, batch_size=batch_size)
    accuracy = float((preds == labels).mean())

    rates = []
    for _ in range(reps):
        t0 = time.perf_counter()
        predict(model, streams, batch_size=batch_size)
        rates.append(len(streams) / (time.perf_counter() - t0))
    return EvalResult(
        accuracy=accuracy,
        n_samples=len(streams),
        samples_per_sec=float(np.median(rates)),
        rep_rates=tuple(rates),
    )


def relative_accuracy(accuracy: float, base_accuracy: float) -> float:
    """Accuracy as a percentage of the unpruned model's accuracy."""
    if base_accuracy <= 0.0:
        raise ParameterError("base accuracy must be positive")
    return 100.0 * accuracy / base_accuracy


@dataclass(frozen=True)
class SeedStudy:
    """Random-pruning accuracy as a function of ratio, over many plan seeds."""

    base_accuracy: float
    ratios: tuple
    n_seeds: int
    rows: dict   # ratio -> {"accuracies": tuple, "mean": float, "std": float,
                 #           "relative_mean": float}

    def to_json(self) -> dict:
        return {
            "base_accuracy": self.base_accuracy,
            "ratios": list(self.ratios),
            "n_seeds": self.n_seeds,
            "rows": {
                str(r): {
                    "accuracies": list(v["accuracies"]),
                    "mean": v["mean"],
                    "std": v["std"],
                    "relative_mean": v["relative_mean"],
                }
                for r, v in self.rows.items()
            },
        }


def seed_study(
    model,
    streams,
    ratios,
    n_seeds: int = 10,
    window: tuple | None = None,
    reps: int = 1,
) -> SeedStudy:
    """Prune uniformly random window layers, no repair, n_seeds plans per ratio.

    Ratio 0 produces the unpruned model for every seed, so its relative mean
    is exactly 100.
    """
    m = as_model(model)
    if n_seeds < 1:
        raise ParameterError("need at least one seed")
    lo, hi = check_window(window, m.config.n_layers)
    base = evaluate(m, streams, reps=reps)
    rows = {}
    for ratio in ratios:
        accs = []
        for seed in range(n_seeds):
            plan = random_plan(m.config.n_layers, ratio, window=(lo, hi), seed=seed)
            pruned = naive_prune(m, plan)
            accs.append(evaluate(pruned, streams, reps=reps).accuracy)
        accs_arr = np.array(accs)
        rows[float(ratio)] = {
            "accuracies": tuple(accs),
            "mean": float(accs_arr.mean()),
            "std": float(accs_arr.std()),
            "relative_mean": relative_accuracy(float(accs_arr.mean()), base.accuracy),
        }
    return SeedStudy(
        base_accuracy=base.accuracy,
        ratios=tuple(float(r) for r in ratios),
        n_seeds=n_seeds,
        rows=rows,
    )


def similarity_heatmap(model, corpus: CalibrationCorpus) -> np.ndarray:
    """(L, L) mean token cosine between every pair of layer outputs.

    Entry (i, j) compares the outputs of layers i+1 and j+1 (stream states
    x(1)..x(L)).  Symmetric with unit diagonal up to rounding.
    """
    m = as_model(model)
    L = m.config.n_layers
    feats = extract_features(m, corpus, range(1, L + 1))
    mats = [feats[l].values for l in range(1, L + 1)]
    grid = np.zeros((L, L), dtype=np.float64)
    for i in range(L):
        grid[i, i] = float(cosine_rows(mats[i], mats[i]).mean())
        for j in range(i + 1, L):
            v = float(cosine_rows(mats[i], mats[j]).mean())
            grid[i, j] = v
            grid[j, i] = v
    return grid


def gap_from_features(target: np.ndarray, probe: np.ndarray) -> float:
    """Mean cosine between row-aligned feature matrices."""
    target = np.asarray(target)
    probe = np.asarray(probe)
    if target.shape != probe.shape:
        raise ParameterError(
            f"feature shapes differ: {target.shape} vs {probe.shape}"
        )
    return float(cosine_rows(target, probe).mean())


@dataclass(frozen=True)
class GapReport:
    """How closely every survivor's output tracks its original counterpart."""

    aggregate: float     # mean over retained layers of the per-layer cosines
    per_layer: dict      # original retained index -> mean output cosine
    readout: float       # cosine at the final stream state
    n_rows: int
    pca_original: np.ndarray   # (n_rows, 2) readout features, shared basis
    pca_pruned: np.ndarray

    def to_json(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "per_layer": {str(k): v for k, v in self.per_layer.items()},
            "readout": self.readout,
            "n_rows": self.n_rows,
            "pca_original": self.pca_original.tolist(),
            "pca_pruned": self.pca_pruned.tolist(),
        }


def gap_report(original, pruned, corpus: CalibrationCorpus) -> GapReport:
    """Compare a pruned model's stream against the original, layer by layer.

    For every retained layer the report holds the mean cosine between the
    layer's output in the original model and in the pruned model; the
    aggregate is the unweighted mean over retained layers.  Readout features
    of both models are also projected onto the original's top two principal
    directions for plotting.
    """
    om = as_model(original)
    prov = pruned.provenance
    qm = pruned.model
    if len(prov.source_layers) != qm.config.n_layers:
        raise ParameterError("provenance does not match the pruned model depth")

    orig_layers = [o + 1 for o in prov.source_layers]
    new_layers = [n + 1 for n in range(qm.config.n_layers)]
    of = extract_features(om, corpus, orig_layers)
    nf = extract_features(qm, corpus, new_layers)

    per_layer = {}
    for o, n in zip(orig_layers, new_layers):
        per_layer[o - 1] = gap_from_features(of[o].values, nf[n].values)
    aggregate = float(np.mean(list(per_layer.values())))
    readout = per_layer[prov.source_layers[-1]]

    a = of[orig_layers[-1]].values.astype(np.float64)
    b = nf[new_layers[-1]].values.astype(np.float64)
    center = a.mean(axis=0)
    svd = thin_svd(np.ascontiguousarray((a - center).astype(np.float32)))
    basis = svd.vt[: min(2, svd.vt.shape[0])].astype(np.float64).T
    return GapReport(
        aggregate=aggregate,
        per_layer=per_layer,
        readout=readout,
        n_rows=a.shape[0],
        pca_original=(a - center) @ basis,
        pca_pruned=(b - center) @ basis,
    )
