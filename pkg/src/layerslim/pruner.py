"""Estimator-style front end over the localize/compensate pipeline.

Both classes follow the scikit-learn protocol: constructor arguments are
stored untouched, fitting learns everything and parks it in trailing
underscore attributes, and get_params/set_params/clone work as usual.  The
calibration corpus plays the role of X; the model under surgery is a
constructor parameter, and transform() returns the pruned model.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .compensation import DEFAULT_RANK, assemble, build_bases
from .errors import ParameterError, StateError
from .localizer import make_plan, score_layers
from .token_importance import DEFAULT_KEEP_RATIO


class LayerLocalizer(BaseEstimator):
    """Scores layer redundancy on a calibration corpus and plans the cut.

    Parameters
    ----------
    model : Model whose layers are scored.
    policy : token policy for the cosine statistic
        ("all", "visual", "text", or "tis").
    ratio : fraction of layers to prune, at most 0.5.
    window : (lo, hi) layer range to consider; None means the deeper half.
    p : keep ratio for the "tis" policy.
    """

    def __init__(self, model=None, policy="tis", ratio=0.25, window=None,
                 p=DEFAULT_KEEP_RATIO):
        self.model = model
        self.policy = policy
        self.ratio = ratio
        self.window = window
        self.p = p

    def fit(self, X, y=None):
        """X is a CalibrationCorpus; y is ignored."""
        if self.model is None:
            raise ParameterError("LayerLocalizer needs a model to score")
        self.report_ = score_layers(
            self.model, X, policy=self.policy, window=self.window, p=self.p
        )
        self.plan_ = make_plan(self.report_, self.ratio)
        return self

    def plan(self):
        if not hasattr(self, "plan_"):
            raise StateError("localizer is not fitted yet")
        return self.plan_


class LayerPruner(BaseEstimator):
    """Localize, measure stream gaps, and emit a repaired pruned model.

    With compensate=False the planned layers are simply dropped; otherwise
    each survivor paired to a pruned layer has its input-reading matrices
    amplified along the measured gap subspace of rank `rank`.
    """

    def __init__(self, model=None, policy="tis", ratio=0.25, rank=DEFAULT_RANK,
                 compensate=True, window=None, p=DEFAULT_KEEP_RATIO):
        self.model = model
        self.policy = policy
        self.ratio = ratio
        self.rank = rank
        self.compensate = compensate
        self.window = window
        self.p = p

    def fit(self, X, y=None):
        """Learn the plan and, when compensating, the gap bases from X."""
        if self.model is None:
            raise ParameterError("LayerPruner needs a model to prune")
        localizer = LayerLocalizer(
            model=self.model, policy=self.policy, ratio=self.ratio,
            window=self.window, p=self.p,
        ).fit(X)
        self.report_ = localizer.report_
        self.plan_ = localizer.plan_
        if self.compensate:
            self.bases_ = build_bases(self.model, X, self.plan_, rank=self.rank)
            self.pairing_ = dict(self.bases_.pairing)
        else:
            self.bases_ = None
            self.pairing_ = {}
        return self

    def transform(self, model=None):
        """Apply the learned surgery; defaults to the model fitted against."""
        if not hasattr(self, "plan_"):
            raise StateError("pruner is not fitted yet")
        target = self.model if model is None else model
        return assemble(target, self.plan_, self.bases_)

    def fit_transform(self, X, y=None):
        return self.fit(X, y).transform()
