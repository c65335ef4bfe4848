"""Optimal-transport alignment between image regions and text tokens.

The package solves discrete transport problems (exact min-cost flow,
Sinkhorn, IPOT), composes OT and sum-max cosine scores for cross-modal
retrieval, trains the two projection layers with a hardest-negative triplet
loss, and evaluates retrieval and phrase localization.  File formats and a
seeded synthetic dataset generator live in `dataio`; the `otalign` command
wraps everything.
"""

from .alignment import (
    AlignmentResult,
    composed_score,
    cosine_similarity_matrix,
    cost_from_similarity,
    export_heatmap,
    localize,
    ot_similarity,
    score_matrix,
    summax_image_text,
    summax_text_image,
)
from .dataio import (
    DatasetManifest,
    FeatureBag,
    ManifestRecord,
    SyntheticConfig,
    generate_synthetic,
    load_hidden_alignment,
    load_manifest,
    load_pair_arrays,
    read_feature_bag,
    read_histogram,
    read_matrix,
    write_feature_bag,
    write_histogram,
    write_manifest,
    write_matrix,
)
from .errors import (
    CheckpointFormatError,
    CorruptFileError,
    DanglingReferenceError,
    FileFormatError,
    InfeasibleMarginalsError,
    InvalidArgumentError,
    NumericInstabilityError,
    OtAlignError,
)
from .evaluation import (
    BoundingBox,
    LocalizationCase,
    RetrievalRanking,
    iou,
    localization_recall,
    recall_at_k,
    retrieval_metrics,
    rsum,
    write_metric_report,
)
from .solvers import (
    SolverConfig,
    SolverReport,
    TransportPlan,
    marginal_residual,
    plan_support_size,
    solve,
    solve_exact,
    solve_ipot,
    solve_sinkhorn,
    uniform_histogram,
    validate_histogram,
)
from .training import (
    LossGradients,
    ModelParams,
    ProjectionLayer,
    TrainConfig,
    initialize_params,
    load_checkpoint,
    loss_gradients,
    project,
    save_checkpoint,
    train,
    triplet_loss_hardest,
)

__version__ = "0.1.0"
