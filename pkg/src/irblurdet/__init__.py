"""Joint feature-domain deblurring and small infrared target detection.

Synthetic motion-blur benchmark generation, a dual-branch training
protocol where a clear-image pass supervises the blurred pass through
shared weights, and detection metrics.
"""

from .blursynth import BlurLevel, MotionKernel, SynthConfig, apply_blur, build_dataset, make_linear_kernel
from .config import EvalConfig, ExperimentConfig, TrainConfig, load_config, save_config
from .errors import ConfigError, GenerationError, InvalidParameterError
from .fdd import FddConfig, FddNet, FddTaps, count_parameters
from .fsgm import FrequencyStructureGuidance, FsgmConfig
from .losses import LossBreakdown, LossSchedule, deb_loss, det_loss, fcss_loss, ssim_map, total_loss
from .metrics import EvalReport, ScrReport, evaluate_detections, psnr, scr
from .model import DeblurDetector, ModelConfig
from .trainer import infer, run_training, train_step

__version__ = "0.1.0"

__all__ = [
    "BlurLevel",
    "ConfigError",
    "DeblurDetector",
    "EvalConfig",
    "EvalReport",
    "ExperimentConfig",
    "FddConfig",
    "FddNet",
    "FddTaps",
    "FrequencyStructureGuidance",
    "FsgmConfig",
    "GenerationError",
    "InvalidParameterError",
    "LossBreakdown",
    "LossSchedule",
    "ModelConfig",
    "MotionKernel",
    "ScrReport",
    "SynthConfig",
    "TrainConfig",
    "apply_blur",
    "build_dataset",
    "count_parameters",
    "deb_loss",
    "det_loss",
    "evaluate_detections",
    "fcss_loss",
    "infer",
    "load_config",
    "make_linear_kernel",
    "psnr",
    "run_training",
    "save_config",
    "scr",
    "ssim_map",
    "total_loss",
    "train_step",
]
