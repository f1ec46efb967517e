"""Codebook-guided bootstrapping for self-supervised image representation
learning, with a from-scratch float64 autodiff core and a desk-scale
evaluation harness (linear probing, fine-tuning, ROC-AUC)."""

from .autodiff import Tensor, GradReport, grad_check
from .codebook import Codebook, init_codebook, quantize, quantization_loss
from .config import RunConfig, desk_config, paper_config, tiny_config
from .data import AugmentConfig, Dataset, ImageSample, generate_synthetic
from .model import ModelState, ema_update, forward_pass, init_model_state
from .objectives import LossWeights, directional_loss, symmetric_loss

__version__ = "0.1.0"

__all__ = [
    "Tensor", "GradReport", "grad_check",
    "Codebook", "init_codebook", "quantize", "quantization_loss",
    "RunConfig", "desk_config", "paper_config", "tiny_config",
    "AugmentConfig", "Dataset", "ImageSample", "generate_synthetic",
    "ModelState", "ema_update", "forward_pass", "init_model_state",
    "LossWeights", "directional_loss", "symmetric_loss",
    "__version__",
]
