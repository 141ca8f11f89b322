"""FocusNet: two-branch gated-attention segmentation on a small numpy autodiff engine."""
from .autodiff import Tape, Tensor, backward, finite_diff_check, make_rng
from .data import (
    AugmentationConfig,
    DatasetManifest,
    NormalizationStats,
    SegmentationSample,
    load_dataset,
    synth_generate,
)
from .estimator import ChannelStandardizer, FocusNetSegmenter
from .metrics import ConfusionCounts, MetricsReport, evaluate, format_table
from .model import ArchConfig, FocusNetParams, ForwardTrace, build, forward, param_count
from .training import TrainConfig, dice_loss, train

__all__ = [
    "ArchConfig", "AugmentationConfig", "ChannelStandardizer", "ConfusionCounts", "DatasetManifest",
    "FocusNetParams", "FocusNetSegmenter", "ForwardTrace", "MetricsReport", "NormalizationStats",
    "SegmentationSample", "Tape", "Tensor", "TrainConfig", "backward", "build", "dice_loss", "evaluate",
    "finite_diff_check", "format_table", "forward", "load_dataset", "make_rng", "param_count",
    "synth_generate", "train",
]
__version__ = "0.1.0"
