"""Adversarial co-training for brain tumour segmentation with missing modalities."""

__version__ = "0.1.0"

from .data import ModalityMask, enumerate_modality_subsets  # noqa: E402,F401
from .losses import LossWeights  # noqa: E402,F401
from .trainer import CoTrainer, TrainConfig, fit, evaluate  # noqa: E402,F401
