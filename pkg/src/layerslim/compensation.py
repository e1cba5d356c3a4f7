"""Subspace compensation: repair retained layers after pruning.

Removing a layer leaves its neighbours reading a residual stream that no
longer carries the removed contribution.  For each pruned layer we pick the
nearest surviving layer, measure the gap between the two stream states on a
calibration corpus, keep the top right-singular directions of that gap, and
amplify the survivor's input-reading matrices along them:

    W' = (I + V_k V_k^T) W      for w_q, w_k, w_v, w_up

The output-side matrices (w_o, w_down) and the norm gains stay untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .calibration import CalibrationCorpus, FeatureMatrix, extract_features
from .errors import DegenerateGapError, ParameterError
from .linalg import thin_svd, top_k_right_singular
from .localizer import PruningPlan
from .model import (
    LayerWeights,
    Model,
    PruneProvenance,
    PrunedModel,
    as_model,
)
from .validation import check_matrix

DEFAULT_RANK = 64
DEGENERATE_NORM = 1e-8

PROJECTED_FIELDS = ("w_q", "w_k", "w_v", "w_up")


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal directions spanning the dominant part of one stream gap."""

    basis: np.ndarray   # (D, k) float32, columns orthonormal
    residual: float     # |H - H B B^T|_F / |H|_F
    rank: int

    def __post_init__(self):
        if self.basis.ndim != 2 or self.basis.shape[1] != self.rank:
            raise ParameterError("basis column count must equal rank")


@dataclass(frozen=True)
class CompensationSet:
    """Everything needed to repair the survivors of one pruning plan."""

    pairing: dict       # pruned layer -> retained partner
    bases: dict         # pruned layer -> SubspaceBasis
    residuals: dict     # pruned layer -> relative residual
    skipped: tuple      # pruned layers whose gap was numerically zero
    rank: int


def pair_layers(plan: PruningPlan) -> dict:
    """Assign each pruned layer its nearest free retained layer.

    Pruned layers are served shallow-first; each retained layer can stand in
    for at most one pruned layer; distance ties go to the lower index.
    """
    available = set(plan.retained)
    pairing: dict[int, int] = {}
    for lp in plan.pruned:
        if not available:
            raise ParameterError(f"no retained layer left to pair with {lp}")
        partner = min(available, key=lambda lr: (abs(lr - lp), lr))
        pairing[lp] = partner
        available.discard(partner)
    return pairing


def difference_matrix(pruned_feats: FeatureMatrix, retained_feats: FeatureMatrix) -> np.ndarray:
    """Row-aligned gap H between two stream states over the same tokens."""
    if pruned_feats.provenance != retained_feats.provenance:
        raise ParameterError(
            "gap requires feature matrices over the same tokens in the same order"
        )
    if pruned_feats.layer == retained_feats.layer:
        raise ParameterError("gap between a stream state and itself is always zero")
    a = check_matrix(pruned_feats.values, "pruned-side features")
    b = check_matrix(retained_feats.values, "retained-side features")
    if a.shape != b.shape:
        raise ParameterError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return np.ascontiguousarray(a - b)


def extract_subspace(h: np.ndarray, rank: int = DEFAULT_RANK) -> SubspaceBasis:
    """Top right-singular directions of the gap, with reconstruction residual.

    The rank is clamped to min(rows, cols).  A gap with Frobenius norm under
    1e-8 carries no usable direction and raises DegenerateGapError.
    """
    h = check_matrix(h, "gap matrix")
    if rank < 1:
        raise ParameterError(f"rank must be at least 1, got {rank}")
    h64 = h.astype(np.float64)
    fro = float(np.linalg.norm(h64))
    if fro < DEGENERATE_NORM:
        raise DegenerateGapError(
            f"gap matrix is numerically zero (frobenius {fro:.3e})"
        )
    k = min(rank, h.shape[0], h.shape[1])
    svd = thin_svd(h)
    basis = top_k_right_singular(svd, k)
    b64 = basis.astype(np.float64)
    recon = (h64 @ b64) @ b64.T
    residual = float(np.linalg.norm(h64 - recon) / fro)
    return SubspaceBasis(basis=basis, residual=residual, rank=k)


def project_weights(lw: LayerWeights, basis: SubspaceBasis) -> LayerWeights:
    """Amplify the input-reading matrices along the gap directions."""
    d = lw.w_q.shape[0]
    if basis.basis.shape[0] != d:
        raise ParameterError(
            f"basis lives in {basis.basis.shape[0]} dims, weights in {d}"
        )
    b = basis.basis.astype(np.float64)
    amp = np.eye(d) + b @ b.T
    out = lw.copy()
    for field in PROJECTED_FIELDS:
        w = getattr(lw, field).astype(np.float64)
        setattr(out, field, np.ascontiguousarray((amp @ w).astype(np.float32)))
    return out


def build_bases(
    model,
    corpus: CalibrationCorpus,
    plan: PruningPlan,
    rank: int = DEFAULT_RANK,
) -> CompensationSet:
    """Measure every pair's stream gap on the corpus and extract its basis.

    All stream states come from the original, unpruned model in one pass.
    Pairs whose gap is numerically zero are recorded as skipped and stay
    uncompensated; everything else proceeds.
    """
    m = as_model(model)
    if plan.n_layers != m.config.n_layers:
        raise ParameterError(
            f"plan is for {plan.n_layers} layers, model has {m.config.n_layers}"
        )
    pairing = pair_layers(plan)
    if not pairing:
        return CompensationSet(pairing={}, bases={}, residuals={}, skipped=(), rank=rank)
    needed = sorted({*pairing.keys(), *pairing.values()})
    feats = extract_features(m, corpus, needed)
    bases: dict[int, SubspaceBasis] = {}
    residuals: dict[int, float] = {}
    skipped = []
    for lp in sorted(pairing):
        lr = pairing[lp]
        gap = difference_matrix(feats[lp], feats[lr])
        try:
            sb = extract_subspace(gap, rank)
        except DegenerateGapError:
            skipped.append(lp)
            continue
        bases[lp] = sb
        residuals[lp] = sb.residual
    return CompensationSet(
        pairing=pairing,
        bases=bases,
        residuals=residuals,
        skipped=tuple(skipped),
        rank=rank,
    )


def assemble(model, plan: PruningPlan, comp: CompensationSet | None = None) -> PrunedModel:
    """Drop the planned layers and apply any compensation to the survivors."""
    m = as_model(model)
    if plan.n_layers != m.config.n_layers:
        raise ParameterError(
            f"plan is for {plan.n_layers} layers, model has {m.config.n_layers}"
        )
    if comp is not None and set(comp.pairing) != set(plan.pruned):
        raise ParameterError("compensation set was built for a different plan")

    project_for: dict[int, SubspaceBasis] = {}
    if comp is not None:
        for lp, sb in comp.bases.items():
            project_for[comp.pairing[lp]] = sb

    pruned = set(plan.pruned)
    layers = []
    source = []
    for i, lw in enumerate(m.layers):
        if i in pruned:
            continue
        source.append(i)
        layers.append(project_weights(lw, project_for[i]) if i in project_for else lw.copy())

    cfg = replace(m.config, n_layers=len(layers))
    new_model = Model(
        config=cfg,
        embed=m.embed.copy(),
        pos_embed=m.pos_embed.copy(),
        layers=layers,
        out_norm_gain=m.out_norm_gain.copy(),
        unembed=m.unembed.copy(),
    )
    prov = PruneProvenance(
        pruned=plan.pruned,
        source_layers=tuple(source),
        pairing=dict(comp.pairing) if comp is not None else {},
        rank=comp.rank if comp is not None else 0,
        residuals=dict(comp.residuals) if comp is not None else {},
        skipped=comp.skipped if comp is not None else (),
        policy=plan.policy,
        ratio=plan.ratio,
    )
    return PrunedModel(model=new_model, provenance=prov)


def naive_prune(model, plan: PruningPlan) -> PrunedModel:
    """Remove the planned layers with no repair at all."""
    return assemble(model, plan, comp=None)


def scp_prune(
    model,
    corpus: CalibrationCorpus,
    plan: PruningPlan,
    rank: int = DEFAULT_RANK,
) -> PrunedModel:
    """Full pipeline step: measure gaps, build bases, prune, compensate."""
    comp = build_bases(model, corpus, plan, rank=rank)
    return assemble(model, plan, comp)
