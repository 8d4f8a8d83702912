"""Hierarchical scale recalibration network for crowd counting, on a small numpy autodiff core."""

from .data import Sample, augment, synth_dataset
from .density import Adaptive, Fixed, PointAnnotations, apply_roi, knn_mean_distance, make_density, make_pyramid
from .model import ForwardOutput, HSRNet, ModelConfig
from .objectives import LossBreakdown, density_loss, game, mae_mse, scale_consistency_loss
from .pipeline import EvalReport, TrainConfig, ablate, evaluate, train

__version__ = "0.1.0"
