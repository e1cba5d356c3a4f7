"""Training-free layer pruning for toy residual transformers.

The pipeline has two halves: redundancy scoring over attention-selected
tokens picks which layers to drop, and subspace compensation repairs the
survivors so the residual stream keeps pointing where the original pointed.
"""

__version__ = "0.1.0"

from .calibration import (
    CalibrationCorpus,
    FeatureMatrix,
    extract_features,
    load_corpus,
    save_corpus,
)
from .compensation import (
    CompensationSet,
    SubspaceBasis,
    build_bases,
    extract_subspace,
    naive_prune,
    pair_layers,
    project_weights,
    scp_prune,
)
from .errors import (
    ArchiveError,
    CorpusError,
    DegenerateGapError,
    LayerslimError,
    NumericError,
    ParameterError,
    ShapeError,
    StateError,
)
from .harness import (
    EvalResult,
    GapReport,
    SeedStudy,
    evaluate,
    gap_report,
    relative_accuracy,
    seed_study,
    similarity_heatmap,
)
from .linalg import SvdResult, thin_svd, top_k_right_singular
from .localizer import (
    PruningPlan,
    RedundancyReport,
    enumerate_oracle,
    make_plan,
    random_plan,
    score_layers,
)
from .model import (
    ForwardTrace,
    LayerWeights,
    Model,
    ModelConfig,
    PruneProvenance,
    PrunedModel,
    TokenStream,
    forward,
    init_model,
    load_model,
    save_model,
)
from .pruner import LayerLocalizer, LayerPruner
from .tasks import MajorityTask
from .token_importance import TokenScoreSheet, score_tokens, select_top_p
from .training import train_toy

__all__ = [
    "ArchiveError",
    "CalibrationCorpus",
    "CompensationSet",
    "CorpusError",
    "DegenerateGapError",
    "EvalResult",
    "FeatureMatrix",
    "ForwardTrace",
    "GapReport",
    "LayerLocalizer",
    "LayerPruner",
    "LayerWeights",
    "LayerslimError",
    "MajorityTask",
    "Model",
    "ModelConfig",
    "NumericError",
    "ParameterError",
    "PruneProvenance",
    "PrunedModel",
    "PruningPlan",
    "RedundancyReport",
    "SeedStudy",
    "ShapeError",
    "StateError",
    "SubspaceBasis",
    "SvdResult",
    "TokenScoreSheet",
    "TokenStream",
    "build_bases",
    "enumerate_oracle",
    "evaluate",
    "extract_features",
    "extract_subspace",
    "forward",
    "gap_report",
    "init_model",
    "load_corpus",
    "load_model",
    "make_plan",
    "naive_prune",
    "pair_layers",
    "project_weights",
    "random_plan",
    "relative_accuracy",
    "save_corpus",
    "save_model",
    "scp_prune",
    "score_layers",
    "score_tokens",
    "seed_study",
    "select_top_p",
    "similarity_heatmap",
    "thin_svd",
    "top_k_right_singular",
    "train_toy",
    "__version__",
]
