"""Semi-supervised 3D referring segmentation on synthetic desk scenes."""

from .augment import strong_augment, weak_augment
from .experiments import ExperimentPlan, aggregate, run_plan, write_tables
from .losses import LossWeights, bce_loss, dice_loss, mask_iou, supervised_loss, unsupervised_loss
from .metrics import MetricsReport, SplitMetrics, compare_runs, evaluate, format_table
from .model import ModelConfig, ParamVector, forward, init_params, load_checkpoint, save_checkpoint
from .scenes import (
    Dataset,
    DatasetConfig,
    ReferringSample,
    Scene,
    SceneConfig,
    SplitSpec,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_splits,
    save_dataset,
)
from .trainer import MODES, RunResult, SSLState, TrainConfig, TrainingDiverged, run

__version__ = "0.1.0"
