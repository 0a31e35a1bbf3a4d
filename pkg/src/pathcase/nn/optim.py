"""AdamW with decoupled decay, global-norm clipping, and schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


@dataclass
class OptState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: OptState, no_decay=()) -> OptState:
    """One AdamW update, in place on ``params``.

    ``params`` and ``grads`` map names to tensors.  A parameter whose grad
    is missing or ``None`` is left untouched (no decay, no moment update).
    Names in ``no_decay`` skip weight decay.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {tuple(g.shape)} != param {name} {tuple(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        v = state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        update = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        if state.weight_decay and name not in no_decay:
            update = update + state.weight_decay * p
        p.sub_(state.lr * update)
    return state


@torch.no_grad()
def clip_global_norm(grads: dict, max_norm: float):
    """Scale all gradients by ``max_norm / g`` when the global L2 norm ``g`` exceeds it.

    Returns the (possibly rescaled) grads and the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    present = [g for g in grads.values() if g is not None]
    if not present:
        return grads, 0.0
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in present))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: (None if g is None else g * scale) for k, g in grads.items()}
    return grads, total


def cosine_schedule(t, total, warmup, start, peak, end):
    """Linear ``start -> peak`` over ``warmup`` steps, then cosine ``peak -> end`` at ``total``.

    Written as convex combinations so that ``t = warmup`` gives ``peak`` and
    ``t = total`` gives ``end`` exactly.
    """
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if warmup >= total:
        raise ValueError("warmup must be shorter than the schedule")
    if t < warmup:
        a = t / warmup
        return start * (1.0 - a) + peak * a
    s = (t - warmup) / (total - warmup)
    w = (math.cos(math.pi * s) + 1.0) / 2.0
    return peak * w + end * (1.0 - w)


def linear_warmup(t, warmup, start, end):
    """Linear ramp to ``end`` over ``warmup`` steps, constant afterwards."""
    if t >= warmup:
        return end
    a = t / warmup
    return start * (1.0 - a) + end * a
