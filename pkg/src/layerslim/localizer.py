"""Redundancy scoring over a window of layers, and pruning plan construction.

A layer is redundant to the extent it leaves the residual stream pointing the
same way: its score is the mean cosine between its input x(l) and output
x(l+1), taken per kept token, averaged over tokens and then over samples.
Which tokens count is the policy's choice: every position, one modality, or
the positions selected by attention-received importance at that layer.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations
from math import comb, floor

import numpy as np

from .calibration import CalibrationCorpus, batched_traces
from .errors import CorpusError, ParameterError
from .linalg import cosine_rows
from .model import ForwardTrace, TokenStream, as_model
from .token_importance import DEFAULT_KEEP_RATIO, score_tokens

POLICIES = ("all", "visual", "text", "tis")
ORACLE_BUDGET = 2000


def default_window(n_layers: int) -> tuple[int, int]:
    """The deeper half of the network, where redundancy concentrates."""
    return (n_layers // 2, n_layers)


def check_window(window, n_layers: int) -> tuple[int, int]:
    if window is None:
        return default_window(n_layers)
    lo, hi = int(window[0]), int(window[1])
    if not (0 <= lo < hi <= n_layers):
        raise ParameterError(f"window {window} invalid for {n_layers} layers")
    return (lo, hi)


@dataclass(frozen=True)
class RedundancyReport:
    scores: dict            # layer index -> mean cosine
    ranking: tuple          # layer indices, most redundant first
    policy: str
    p: float
    window: tuple
    n_layers: int
    corpus_id: str
    skipped_samples: int = 0

    def to_table(self) -> str:
        """Plain-text table: layer index, score, rank, policy."""
        rank_of = {l: r for r, l in enumerate(self.ranking, start=1)}
        lines = ["layer\tscore\trank\tpolicy"]
        for l in sorted(self.scores):
            lines.append(f"{l}\t{self.scores[l]:.10f}\t{rank_of[l]}\t{self.policy}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class PruningPlan:
    """Which layers go, which stay, and (after pairing) who stands in."""

    pruned: tuple[int, ...]
    retained: tuple[int, ...]
    n_layers: int
    ratio: float
    policy: str
    window: tuple
    pairing: dict | None = None

    def __post_init__(self):
        pruned = tuple(sorted(int(l) for l in self.pruned))
        object.__setattr__(self, "pruned", pruned)
        retained = tuple(sorted(int(l) for l in self.retained))
        object.__setattr__(self, "retained", retained)
        if set(pruned) & set(retained):
            raise ParameterError("pruned and retained layers overlap")
        if set(pruned) | set(retained) != set(range(self.n_layers)):
            raise ParameterError("plan must cover every layer exactly once")
        if len(pruned) > 0 and len(pruned) / self.n_layers > 0.5 + 1e-9:
            raise ParameterError(
                f"pruning {len(pruned)}/{self.n_layers} layers exceeds the 50% cap"
            )
        lo, hi = self.window
        if any(not (lo <= l < hi) for l in pruned):
            raise ParameterError(f"pruned layers {pruned} leave window {self.window}")

    @property
    def count(self) -> int:
        return len(self.pruned)

    def describe(self) -> str:
        return f"prune{list(self.pruned)}@{self.policy}"


def _policy_mask(policy: str, p: float, trace: dict, stream: TokenStream, layer: int) -> np.ndarray:
    if policy == "all":
        return np.ones(len(stream), dtype=bool)
    if policy == "visual":
        return stream.modality_mask()
    if policy == "text":
        return ~stream.modality_mask()
    if policy == "tis":
        ft = ForwardTrace(
            logits=trace["logits"],
            hidden=trace["hidden"],
            attention=trace["attention"],
        )
        return score_tokens(ft, stream, layer, p=p).keep
    raise ParameterError(f"unknown policy {policy!r}, expected one of {POLICIES}")


def score_layers(
    model,
    corpus: CalibrationCorpus,
    policy: str = "all",
    window: tuple | None = None,
    p: float = DEFAULT_KEEP_RATIO,
) -> RedundancyReport:
    """Mean input/output cosine per window layer under a token policy.

    Token-mean then sample-mean, both unweighted, so samples with different
    lengths carry equal weight.  Samples where the policy keeps no token are
    skipped with a warning; if every sample is skipped there is nothing to
    score and a CorpusError is raised.
    """
    m = as_model(model)
    L = m.config.n_layers
    lo, hi = check_window(window, L)
    if policy not in POLICIES:
        raise ParameterError(f"unknown policy {policy!r}, expected one of {POLICIES}")

    per_layer: dict[int, list[float]] = {l: [] for l in range(lo, hi)}
    skipped = 0
    for i, trace in batched_traces(m, corpus, keep="trace"):
        stream = corpus.samples[i]
        used = False
        for layer in range(lo, hi):
            mask = _policy_mask(policy, p, trace, stream, layer)
            kept = np.flatnonzero(mask)
            if kept.size == 0:
                continue
            x_in = trace["hidden"][layer][kept]
            x_out = trace["hidden"][layer + 1][kept]
            per_layer[layer].append(float(cosine_rows(x_in, x_out).mean()))
            used = True
        if not used:
            skipped += 1
            warnings.warn(f"sample {stream.sample_id!r}: policy kept no tokens, skipped")
    if any(len(v) == 0 for v in per_layer.values()):
        raise CorpusError("policy kept zero tokens in every sample; nothing to score")

    scores = {l: float(np.mean(v)) for l, v in per_layer.items()}
    ranking = tuple(sorted(scores, key=lambda l: (-scores[l], -l)))
    return RedundancyReport(
        scores=scores,
        ranking=ranking,
        policy=policy,
        p=float(p),
        window=(lo, hi),
        n_layers=L,
        corpus_id=corpus.digest(),
        skipped_samples=skipped,
    )


def plan_count(ratio: float, n_layers: int) -> int:
    """Number of layers to prune: round(ratio * L), half away from zero."""
    if not (0.0 <= ratio <= 0.5):
        raise ParameterError(f"pruning ratio {ratio} outside [0, 0.5]")
    return int(floor(ratio * n_layers + 0.5))


def make_plan(report: RedundancyReport, ratio: float) -> PruningPlan:
    """Prune the most redundant layers in the window at the given ratio."""
    count = plan_count(ratio, report.n_layers)
    lo, hi = report.window
    if count > hi - lo:
        raise ParameterError(
            f"ratio {ratio} asks for {count} layers but window has {hi - lo}"
        )
    pruned = tuple(sorted(report.ranking[:count]))
    retained = tuple(l for l in range(report.n_layers) if l not in set(pruned))
    return PruningPlan(
        pruned=pruned,
        retained=retained,
        n_layers=report.n_layers,
        ratio=float(ratio),
        policy=report.policy,
        window=report.window,
    )


def random_plan(
    n_layers: int, ratio: float, window: tuple | None = None, seed: int = 0
) -> PruningPlan:
    """Uniform without-replacement choice of window layers to prune."""
    lo, hi = check_window(window, n_layers)
    count = plan_count(ratio, n_layers)
    if count > hi - lo:
        raise ParameterError(f"cannot prune {count} of {hi - lo} window layers")
    rng = np.random.default_rng(seed)
    pruned = tuple(sorted(int(l) for l in rng.choice(np.arange(lo, hi), size=count, replace=False)))
    retained = tuple(l for l in range(n_layers) if l not in set(pruned))
    return PruningPlan(
        pruned=pruned,
        retained=retained,
        n_layers=n_layers,
        ratio=float(ratio),
        policy="random",
        window=(lo, hi),
    )


def enumerate_oracle(
    model,
    corpus: CalibrationCorpus,
    eval_fn,
    count: int,
    window: tuple | None = None,
    budget: int = ORACLE_BUDGET,
):
    """Exhaustively score every size-`count` pruning choice in the window.

    eval_fn(model, plan, corpus) -> float, higher is better.  Refuses to run
    when the combination count exceeds `budget`.  Returns (best_plan, table)
    with the full enumeration table as (combo, metric) pairs in combination
    order; ties keep the first combination.
    """
    m = as_model(model)
    L = m.config.n_layers
    lo, hi = check_window(window, L)
    if count < 0 or count > hi - lo:
        raise ParameterError(f"count {count} invalid for window {(lo, hi)}")
    total = comb(hi - lo, count)
    if total > budget:
        raise ParameterError(
            f"enumeration needs {total} evaluations, over the budget of {budget}"
        )
    table = []
    best = None
    best_metric = -np.inf
    for combo in combinations(range(lo, hi), count):
        retained = tuple(l for l in range(L) if l not in set(combo))
        plan = PruningPlan(
            pruned=combo,
            retained=retained,
            n_layers=L,
            ratio=count / L,
            policy="oracle",
            window=(lo, hi),
        )
        metric = float(eval_fn(m, plan, corpus))
        table.append((combo, metric))
        if metric > best_metric:
            best_metric = metric
            best = plan
    return best, table
