"""Tensor primitives with the semantics the encoders rely on.

Plain arithmetic, matmul, reshape, concat/slice, exp/log/sqrt, reductions
and embedding lookup are used straight from torch; this module holds the
operations whose behaviour is pinned down more tightly (masking, epsilon
guards, the exact GELU, per-sample stochastic depth).
"""

from __future__ import annotations

import math

import torch

LN_EPS = 1e-6
L2_EPS = 1e-12


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def sigmoid(x):
    return torch.sigmoid(x)


def log_sigmoid(x):
    """``log(sigmoid(x))`` without overflow; ``log(1 - sigmoid(x)) == log_sigmoid(-x)``."""
    return torch.clamp(x, max=0) - torch.log1p(torch.exp(-torch.abs(x)))


def softmax(logits, bias=None, dim=-1):
    """Softmax of ``logits + bias`` with max-subtraction.

    ``bias`` may hold ``-inf`` entries; those come out exactly 0.  A row in
    which every entry is ``-inf`` yields all zeros instead of NaN.
    """
    if bias is not None:
        try:
            logits = logits + bias
        except RuntimeError as e:
            raise ValueError(
                f"softmax bias shape {tuple(bias.shape)} incompatible with "
                f"logits {tuple(logits.shape)}"
            ) from e
    m = logits.detach().amax(dim=dim, keepdim=True)
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(logits - m)
    s = e.sum(dim=dim, keepdim=True)
    return e / torch.where(s > 0, s, torch.ones_like(s))


def log_softmax(logits, dim=-1):
    return torch.log_softmax(logits, dim=dim)


def layer_norm(x, weight=None, bias=None, eps=LN_EPS):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def l2_normalize(x, dim=-1, eps=L2_EPS):
    """``x / max(||x||, eps)``; the zero vector maps to zero."""
    norm = torch.sqrt((x * x).sum(dim=dim, keepdim=True))
    return x / torch.clamp(norm, min=eps)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[-1]:
        raise ValueError(
            f"linear: input width {tuple(x.shape)} does not match weight {tuple(weight.shape)}"
        )
    y = x @ weight.transpose(-1, -2)
    return y if bias is None else y + bias


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def dropout(x, p: float, training: bool):
    if not training or p == 0.0:
        return x
    keep = (torch.rand_like(x) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def drop_path(x, p: float, training: bool):
    """Per-sample residual gating; rescales survivors by ``1 / (1 - p)``."""
    if not training or p == 0.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    keep = (torch.rand(shape, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def embedding(table, index):
    return table[index]
