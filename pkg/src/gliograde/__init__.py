"""Two-stage glioma grading: 3D U-Net whole-tumour segmentation, then a 3D
residual network on the T1ce tumour ROI deciding GBM vs LGG."""

from .errors import GliogradeError
from .grading import ClassifierConfig, GradingPipeline, build_classifier, grade, train_classifier
from .metrics import ConfusionCounts, EvalReport, auc, dice, evaluate_grading, mcc
from .phantom import PhantomSpec, generate, generate_cohort
from .tensor import Tensor, no_grad
from .unet import UNetConfig, build_unet, segment_volume, train_segmentation
from .volumes import ModelCheckpoint, MultiModalCase, Volume, load_manifest, read_native, read_nifti, write_native

__version__ = "0.1.0"

__all__ = [
    "ClassifierConfig", "ConfusionCounts", "EvalReport", "GliogradeError", "GradingPipeline", "ModelCheckpoint",
    "MultiModalCase", "PhantomSpec", "Tensor", "UNetConfig", "Volume", "auc", "build_classifier", "build_unet",
    "dice", "evaluate_grading", "generate", "generate_cohort", "grade", "load_manifest", "mcc", "no_grad",
    "read_native", "read_nifti", "segment_volume", "train_classifier", "train_segmentation", "write_native",
]
