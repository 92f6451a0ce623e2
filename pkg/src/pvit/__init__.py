"""Desk-scale self-supervised ViT pre-training (cls self-distillation plus
masked patch modeling), person-ReID fine-tuning, retrieval evaluation and
feature visualization, on a numpy reverse-mode autodiff core."""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
