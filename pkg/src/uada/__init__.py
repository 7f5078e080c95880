"""Uncertainty-aware domain adaptation for lesion segmentation.

A stochastic content/style translation network trained jointly with a
residual-adapter segmenter, plus a synthetic two-modality phantom dataset and
the evaluation protocol (recall, precision, DSC, AP over 5 folds).
"""

from .config import BaselineMode, TrainConfig
from .domains import Domain
from .errors import CorruptDataError, InvalidConfigError, PoisonedLossError
from .losses import LossReport, LossWeights
from .phantom import DatasetConfig, DatasetManifest, PhantomSlice, build_dataset, load_manifest, load_slices
from .segmentation import SegConfig, Segmenter
from .translation import Translator, TranslatorConfig

__version__ = "0.1.0"

__all__ = [
    "BaselineMode",
    "CorruptDataError",
    "DatasetConfig",
    "DatasetManifest",
    "Domain",
    "InvalidConfigError",
    "LossReport",
    "LossWeights",
    "PhantomSlice",
    "PoisonedLossError",
    "SegConfig",
    "Segmenter",
    "TrainConfig",
    "Translator",
    "TranslatorConfig",
    "build_dataset",
    "load_manifest",
    "load_slices",
]
