"""Desk-scale joint video/audio diffusion transformer core (numpy, f64)."""
from .autodiff import Tape, Tensor, backward, grad_check
from .blocks import ModelConfig, TokenSequence
from .conditioning import ConditionBundle, ReferenceSet, TaskSpec
from .model import JointAVModel, SparseSpec, build_model

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "grad_check", "ModelConfig", "TokenSequence", "ConditionBundle",
           "ReferenceSet", "TaskSpec", "JointAVModel", "SparseSpec", "build_model"]
