"""Small numpy CNN engine: conv/pool/dense layers, MSE, backprop and Adam."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .layers import mse_loss
from .model import ArchSpec, CnnModel, backward, build_model, forward, loss_and_grad, predict
from .optim import AdamState, NonFiniteGradient, adam_step

__all__ = [
    "AdamState", "ArchSpec", "Checkpoint", "CnnModel", "NonFiniteGradient", "adam_step",
    "backward", "build_model", "forward", "load_checkpoint", "loss_and_grad", "mse_loss",
    "predict", "save_checkpoint",
]
