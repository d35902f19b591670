"""Two-stage knowledge distillation for very low-resolution recognition.

A small convolutional student sees 16x16 inputs. Stage 1 regresses its
backbone onto a generative teacher's features; stage 2 freezes the backbone
and trains the head with cross-entropy, logit distillation and a relational
contrastive term against a discriminative teacher. Everything runs on a
numpy reverse-mode autodiff core.
"""

__version__ = "0.1.0"

from . import losses, tensor
from .exceptions import (
    BackboneDriftError,
    BackwardError,
    ConfigMismatchError,
    DivisionGuardError,
    FormatError,
    LRDistillError,
    MissingRecordError,
    NumericalError,
    PreconditionError,
    ShapeError,
)
from .model import ModelConfig, StudentModel
from .tensor import Tensor, backward
from .train import OptimConfig, train_stage1, train_stage2

__all__ = [
    "BackboneDriftError",
    "BackwardError",
    "ConfigMismatchError",
    "DivisionGuardError",
    "FormatError",
    "LRDistillError",
    "MissingRecordError",
    "ModelConfig",
    "NumericalError",
    "OptimConfig",
    "PreconditionError",
    "ShapeError",
    "StudentModel",
    "Tensor",
    "backward",
    "losses",
    "tensor",
    "train_stage1",
    "train_stage2",
]
