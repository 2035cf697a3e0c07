"""Desk-scale simulator of semi-supervised federated learning (IsoFed and baselines)."""

from .aggregation import AggregationConfig, aggregate, dynamic_weighted_agg, fedavg
from .data import (
    AugmentConfig,
    ClientShard,
    Dataset,
    PartitionSpec,
    Role,
    augment,
    batches,
    dirichlet_partition,
    load_mds1,
    normalization_stats,
    save_mds1,
)
from .metrics import MetricReport, evaluate, rank_auc_ovr
from .model import (
    CnnClassifier,
    ModelConfig,
    ModelParams,
    extract_params,
    init_model,
    load_checkpoint,
    load_params,
    params_distance,
    save_checkpoint,
)
from .orchestrator import ExperimentConfig, GlobalState, run_experiment
from .synth import make_blob_dataset
from .training import (
    TeacherStudent,
    TrainerConfig,
    consistency_loss,
    ema_update,
    im_loss,
    im_pretrain,
    sharpen,
    train_labeled_client,
    train_unlabeled_client,
)

__version__ = "0.1.0"
