"""Numerical substrate: primitives, reverse-mode gradients, optimizer, checkpoints.

Tensors and the tape are torch's; everything numerical that the training
recipes depend on (masked softmax, epsilon guards, AdamW, clipping,
schedules, the checkpoint format) is defined here.
"""

import torch

from . import functional
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .optim import OptState, adamw_step, clip_global_norm, cosine_schedule, linear_warmup


def grad(loss, params):
    """Reverse-mode gradients of a scalar ``loss`` w.r.t. ``params``.

    ``params`` is a dict of name -> tensor (or a sequence of tensors).
    Parameters that do not influence ``loss`` get zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    named = params if isinstance(params, dict) else dict(enumerate(params))
    tensors = list(named.values())
    gs = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out = {k: (torch.zeros_like(p) if g is None else g) for (k, p), g in zip(named.items(), gs)}
    return out if isinstance(params, dict) else [out[i] for i in range(len(tensors))]


def dtype_for(precision: int):
    if precision == 64:
        return torch.float64
    if precision == 32:
        return torch.float32
    raise ValueError(f"precision must be 32 or 64, got {precision}")


__all__ = [
    "functional", "grad", "dtype_for", "OptState", "adamw_step", "clip_global_norm",
    "cosine_schedule", "linear_warmup", "load_checkpoint", "save_checkpoint",
]
