"""Cross-modality tumor segmentation trained with weak image-level labels,
healthy/diseased translation, and unpaired modality translation."""

__version__ = "0.1.0"

from .config import (
    Config,
    ExperimentConfig,
    ModelConfig,
    StyleParams,
    SynthConfig,
    TrainConfig,
    load_config,
)
from .data import DatasetManifest, SliceSample, load_dataset, mask_annotations, write_dataset
from .losses import LossReport, LossWeights
from .model import MGenSeg, build_baseline, build_model, load_checkpoint, save_checkpoint
from .synth import build_dataset, generate_phantom, implant_lesion, label_domain
from .training import fit, train_step

__all__ = [
    "Config",
    "DatasetManifest",
    "ExperimentConfig",
    "LossReport",
    "LossWeights",
    "MGenSeg",
    "ModelConfig",
    "SliceSample",
    "StyleParams",
    "SynthConfig",
    "TrainConfig",
    "build_baseline",
    "build_dataset",
    "build_model",
    "fit",
    "generate_phantom",
    "implant_lesion",
    "label_domain",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "mask_annotations",
    "save_checkpoint",
    "train_step",
    "write_dataset",
]
