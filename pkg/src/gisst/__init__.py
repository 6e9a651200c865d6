"""Sparse edge/feature importance learning for GNNs, with motif benchmarks
and an explanation evaluation harness."""

from .autodiff import NumericDomainError, ShapeError, Tape, Tensor
from .explain import (
    Explanation,
    MaskOptConfig,
    edge_metrics,
    evaluate_dataset,
    explain,
    extract_subgraph,
    feature_metrics,
    gisst_global_scores,
    gisst_scores,
    grad_baseline,
    mask_opt_baseline,
    to_dot,
)
from .graph import (
    Dataset,
    DatasetSpec,
    Graph,
    GroundTruth,
    generate,
    generate_ba_community,
    generate_ba_house,
    generate_features,
    generate_tree_cycle,
    generate_tree_grid,
    k_hop_subgraph,
    load_dataset,
    save_dataset,
    split_masks,
)
from .model import (
    GisstParams,
    Model,
    ModelConfig,
    build_model,
    edge_probs,
    feature_probs,
    gcn_forward,
    load_checkpoint,
    save_checkpoint,
    xavier_init,
)
from .train import (
    Adam,
    LossBreakdown,
    TrainingDivergedError,
    TrainReport,
    grid_search,
    total_loss,
    train,
)

__version__ = "0.1.0"
