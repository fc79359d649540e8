"""Distribution models for limit order book price moves.

The package provides a small float64 feedforward engine with exact
analytic gradients (`lobnet.nn`), order-book data handling and a planted
synthetic generator (`lobnet.data`, `lobnet.synthetic`), four model
families under one evaluation interface (`lobnet.models`,
`lobnet.training`), comparison metrics (`lobnet.metrics`), numerical
well-posedness checks (`lobnet.wellposed`), and a reproducible CLI
pipeline (`lobnet.cli`).
"""

from .data import (
    Dataset,
    DatasetSplit,
    JointMove,
    LabeledSample,
    LOBState,
    NormalizationStats,
    build_dataset,
    comovement_stats,
    featureize,
    imbalance_features,
    ingest_events,
    label_case1,
    label_case2,
    read_labeled,
    remove_halts,
    split,
    write_events,
    write_labeled,
)
from .models import (
    EvalCounter,
    Grid,
    GridSoftmaxModel,
    ModelBundle,
    NaiveEmpiricalModel,
    PredictiveDistribution,
    SpatialModel,
    init_grid_softmax,
    init_spatial,
    joint_input_loglik,
    naive_fit,
    predict_topk,
    sample,
    tail_conditional,
)
from .metrics import (
    CoeffRatioResult,
    EvalReport,
    build_eval_report,
    coeff_ratio_study,
    cross_entropy,
    direction_comparison,
    pct_decrease,
    tail_cross_entropy,
    theoretical_pup,
    topk_accuracy,
    win_matrix,
)
from .synthetic import GroundTruth, SyntheticGenConfig, synth_generate
from .training import EpochRecord, TrainConfig, TrainingDivergedError, train_model
from .seeding import child_seed

__version__ = "0.1.0"
