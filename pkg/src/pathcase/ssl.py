"""Stage-1 masked self-distillation: EMA teacher, centering, schedules, losses, loop."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import rng as rngmod
from .encoder import (
    ProjectionConfig, ProjectionHead, SlideEncoder, SlideEncoderConfig, no_decay_names,
    tokens_from_crops,
)
from .nn import OptState, adamw_step, clip_global_norm, cosine_schedule, linear_warmup
from .nn import checkpoint as ckpt
from .views import ViewConfig, make_views, mask_global_views


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SSLConfig:
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp: float = 0.07
    teacher_patch_temp_start: float = 0.04
    teacher_patch_temp: float = 0.07
    temp_warmup_epochs: float = 30
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    center_momentum: float = 0.9
    centering: bool = True
    shared_center: bool = False
    freeze_proto_epochs: float = 3
    base_lr: float = 5e-4
    lr_ref_batch: int = 256
    min_lr: float = 2e-6
    warmup_epochs: float = 5
    wd_start: float = 0.04
    wd_end: float = 0.4
    clip: float = 0.3
    micro_batch: int = 64
    accum_steps: int = 2
    epochs: int = 200

    def __post_init__(self):
        if not (self.student_temp > 0 and self.teacher_temp > 0 and self.teacher_patch_temp > 0):
            raise ValueError("temperatures must be positive")
        if not 0 <= self.momentum_start <= self.momentum_end <= 1:
            raise ValueError("need 0 <= momentum_start <= momentum_end <= 1")

    @property
    def effective_batch(self):
        return self.micro_batch * self.accum_steps


def momentum_at(t, total, mu0, mu_end):
    """Cosine EMA momentum: ``mu0`` at ``t = 0`` rising to ``mu_end`` at ``t = total``."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    w = (math.cos(math.pi * t / total) + 1.0) / 2.0
    return mu0 * w + mu_end * (1.0 - w)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, mu: float):
    """``xi <- mu * xi + (1 - mu) * theta`` over matching parameters."""
    for (nt, pt), (ns, ps) in zip(teacher.named_parameters(), student.named_parameters()):
        if nt != ns or pt.shape != ps.shape:
            raise ValueError(f"teacher/student mismatch at {nt} vs {ns}")
        pt.mul_(mu).add_(ps.detach(), alpha=1.0 - mu)


@torch.no_grad()
def center_update(center, logits, momentum):
    """``c <- lambda c + (1 - lambda) mean(logits)``; the mean runs over all leading dims."""
    batch_mean = logits.detach().reshape(-1, logits.shape[-1]).mean(0)
    return center * momentum + batch_mean * (1.0 - momentum)


def _teacher_probs(logits, center, temp):
    return torch.softmax((logits.detach() - center) / temp, dim=-1)


def loss_cls(teacher_logits, student_logits, center, teacher_temp, student_temp):
    """CLS self-distillation over all (teacher view j, student view i != j) pairs.

    ``teacher_logits``: ``(G, B, K)``; ``student_logits``: ``(G + L, B, K)``,
    whose first ``G`` views are the same global crops the teacher saw.
    """
    G, V = teacher_logits.shape[0], student_logits.shape[0]
    if V <= G - 1 or G < 1:
        raise ValueError(f"need G >= 1 teacher and > G - 1 student views, got {G}, {V}")
    P = _teacher_probs(teacher_logits, center, teacher_temp)
    logQ = torch.log_softmax(student_logits / student_temp, dim=-1)
    total = 0.0
    n_terms = 0
    for j in range(G):
        for i in range(V):
            if i == j:
                continue
            total = total - (P[j] * logQ[i]).sum(-1).mean()
            n_terms += 1
    return total / n_terms


def cls_term_count(G, L):
    return G * (G + L - 1)


def loss_mim(teacher_patch_logits, student_patch_logits, mask, center, teacher_temp,
             student_temp):
    """Masked-patch prediction averaged over the masked valid positions.

    Logits are ``(..., N, K)`` for the same views on both sides; ``mask`` is
    ``(..., N)``.  An empty mask gives a constant 0.
    """
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = int(mask.sum())
    if n == 0:
        return torch.zeros((), dtype=student_patch_logits.dtype)
    P = _teacher_probs(teacher_patch_logits[mask], center, teacher_temp)
    logQ = torch.log_softmax(student_patch_logits[mask] / student_temp, dim=-1)
    return -(P * logQ).sum(-1).sum() / n


def entropy(p):
    return -(p * torch.log(torch.clamp(p, min=1e-300))).sum(-1)


class SSLModel(nn.Module):
    def __init__(self, enc_cfg: SlideEncoderConfig, proj_cfg: ProjectionConfig):
        super().__init__()
        self.encoder = SlideEncoder(enc_cfg)
        self.head = ProjectionHead(enc_cfg.dim, proj_cfg)


@dataclass
class TeacherState:
    model: SSLModel
    center_cls: torch.Tensor
    center_patch: torch.Tensor

    @classmethod
    def from_student(cls, student: SSLModel):
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher.eval()
        K = student.head.prototypes.shape[0]
        dtype = student.head.prototypes.dtype
        return cls(teacher, torch.zeros(K, dtype=dtype), torch.zeros(K, dtype=dtype))


@dataclass
class Schedules:
    """Step-indexed schedules; ``total`` optimizer steps, ``steps_per_epoch`` for epoch units."""

    cfg: SSLConfig
    total: int
    steps_per_epoch: int

    def _steps(self, epochs):
        return int(round(epochs * self.steps_per_epoch))

    @property
    def peak_lr(self):
        return self.cfg.base_lr * self.cfg.effective_batch / self.cfg.lr_ref_batch

    def lr(self, t):
        warm = min(self._steps(self.cfg.warmup_epochs), self.total - 1)
        return cosine_schedule(t, self.total, warm, 0.0, self.peak_lr, self.cfg.min_lr)

    def wd(self, t):
        return cosine_schedule(t, self.total, 0, self.cfg.wd_start, self.cfg.wd_start,
                               self.cfg.wd_end)

    def momentum(self, t):
        return momentum_at(t, self.total, self.cfg.momentum_start, self.cfg.momentum_end)

    def teacher_temp(self, t):
        return linear_warmup(t, self._steps(self.cfg.temp_warmup_epochs),
                             self.cfg.teacher_temp_start, self.cfg.teacher_temp)

    def teacher_patch_temp(self, t):
        return linear_warmup(t, self._steps(self.cfg.temp_warmup_epochs),
                             self.cfg.teacher_patch_temp_start, self.cfg.teacher_patch_temp)

    def prototypes_frozen(self, t):
        return t < self._steps(self.cfg.freeze_proto_epochs)


@dataclass
class StepRecord:
    step: int
    loss_cls: float
    loss_mim: float
    lr: float
    wd: float
    mu: float
    teacher_entropy: float

    def line(self):
        return ",".join(
            [str(self.step)]
            + [repr(float(v)) for v in (self.loss_cls, self.loss_mim, self.lr, self.wd, self.mu,
                                         self.teacher_entropy)]
        )


METRICS_HEADER = "step,L_cls,L_mim,lr,wd,mu,teacher_entropy"


def _micro_batch_loss(grids, student, teacher, cfg, vcfg, temps, rng, batch_id):
    views = [make_views(g, vcfg, rngmod.child(rng, "views", i)) for i, g in enumerate(grids)]
    mask_global_views(views, vcfg, rngmod.child(rng, "mask"))
    G, L, B = vcfg.n_global, vcfg.n_local, len(grids)
    dtype = student.head.prototypes.dtype

    g_crops = [vb.globals[j] for j in range(G) for vb in views]
    g_masks = [vb.masks[j] for j in range(G) for vb in views]
    teacher_tok = tokens_from_crops(g_crops, None, dtype)
    student_tok = tokens_from_crops(g_crops, g_masks, dtype)

    with torch.no_grad():
        t_cls, t_patch = teacher.model.encoder(teacher_tok)
        t_cls_logits = teacher.model.head(t_cls).reshape(G, B, -1)
        t_patch_logits = teacher.model.head(t_patch)

    if cfg.centering:
        teacher.center_cls = center_update(teacher.center_cls, t_cls_logits, cfg.center_momentum)
        if not cfg.shared_center:
            teacher.center_patch = center_update(
                teacher.center_patch, t_patch_logits[teacher_tok.valid], cfg.center_momentum
            )
    c_cls = teacher.center_cls
    c_patch = teacher.center_cls if cfg.shared_center else teacher.center_patch

    s_cls, s_patch = student.encoder(student_tok)
    s_logits = [student.head(s_cls).reshape(G, B, -1)]
    if L:
        l_crops = [vb.locals[j] for j in range(L) for vb in views]
        l_cls, _ = student.encoder(tokens_from_crops(l_crops, None, dtype))
        s_logits.append(student.head(l_cls).reshape(L, B, -1))
    s_logits = torch.cat(s_logits, 0)

    l_cls_val = loss_cls(t_cls_logits, s_logits, c_cls, temps["cls"], cfg.student_temp)
    if student_tok.masked is not None:
        m = student_tok.masked
        s_patch_logits = student.head(s_patch[m])
        l_mim_val = loss_mim(t_patch_logits[m], s_patch_logits, torch.ones(len(s_patch_logits),
                             dtype=torch.bool), c_patch, temps["patch"], cfg.student_temp)
    else:
        l_mim_val = torch.zeros((), dtype=dtype)

    if not (torch.isfinite(l_cls_val) and torch.isfinite(l_mim_val)):
        raise TrainingError(
            f"non-finite loss in batch {batch_id}: L_cls={float(l_cls_val)}, "
            f"L_mim={float(l_mim_val)}"
        )
    P = _teacher_probs(t_cls_logits, c_cls, temps["cls"])
    return l_cls_val, l_mim_val, float(entropy(P).mean())


def pretrain_step(batches, student: SSLModel, teacher: TeacherState, cfg: SSLConfig,
                  vcfg: ViewConfig, sched: Schedules, opt: OptState, step: int, rng,
                  no_decay=frozenset(), batch_id=None) -> StepRecord:
    """One optimizer step over ``len(batches)`` accumulated micro-batches of grids."""
    torch.manual_seed(rngmod.torch_seed(rngmod.child(rng, "torch")))
    student.train()
    temps = {"cls": sched.teacher_temp(step), "patch": sched.teacher_patch_temp(step)}
    params = dict(student.named_parameters())
    for p in params.values():
        p.grad = None
    n = len(batches)
    sums = [0.0, 0.0, 0.0]
    for i, grids in enumerate(batches):
        l_c, l_m, ent = _micro_batch_loss(
            grids, student, teacher, cfg, vcfg, temps, rngmod.child(rng, "micro", i),
            (batch_id, i),
        )
        ((l_c + l_m) / n).backward()
        sums[0] += l_c.item() / n
        sums[1] += l_m.item() / n
        sums[2] += ent / n

    grads = {k: p.grad for k, p in params.items()}
    frozen = sched.prototypes_frozen(step)
    if frozen:
        grads["head.prototypes"] = None
    grads, _ = clip_global_norm(grads, cfg.clip)
    opt.lr, opt.weight_decay = sched.lr(step), sched.wd(step)
    adamw_step(params, grads, opt, no_decay)
    if not frozen:
        student.head.renormalize()

    mu = sched.momentum(step)
    ema_update(teacher.model, student, mu)
    teacher.model.head.renormalize()
    return StepRecord(step, sums[0], sums[1], opt.lr, opt.weight_decay, mu, sums[2])


@dataclass
class Pretrainer:
    """Stage-1 training over a fixed corpus of grids."""

    grids: list
    enc_cfg: SlideEncoderConfig
    proj_cfg: ProjectionConfig
    cfg: SSLConfig
    vcfg: ViewConfig
    seed: int = 0
    dtype: torch.dtype = torch.float64
    total_steps: int | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        torch.manual_seed(rngmod.torch_seed(rngmod.stream(self.seed, "init")))
        self.student = SSLModel(self.enc_cfg, self.proj_cfg).to(self.dtype)
        self.teacher = TeacherState.from_student(self.student)
        self.no_decay = no_decay_names(self.student)
        self.opt = OptState()
        eff = self.cfg.effective_batch
        self.steps_per_epoch = max(1, math.ceil(len(self.grids) / eff))
        total = self.total_steps or self.cfg.epochs * self.steps_per_epoch
        self.sched = Schedules(self.cfg, total, self.steps_per_epoch)
        self.step = 0

    def _next_batches(self):
        eff, mb = self.cfg.effective_batch, self.cfg.micro_batch
        epoch, pos = divmod(self.step, self.steps_per_epoch)
        perm = rngmod.stream(self.seed, "epoch", epoch).permutation(len(self.grids))
        chunk = perm[pos * eff:(pos + 1) * eff]
        return [[self.grids[j] for j in chunk[i:i + mb]] for i in range(0, len(chunk), mb)]

    def train_step(self) -> StepRecord:
        if self.step >= self.sched.total:
            raise TrainingError("schedule exhausted")
        rec = pretrain_step(
            self._next_batches(), self.student, self.teacher, self.cfg, self.vcfg, self.sched,
            self.opt, self.step, rngmod.stream(self.seed, "step", self.step),
            self.no_decay, batch_id=self.step,
        )
        self.step += 1
        self.history.append(rec)
        return rec

    def run(self, n_steps=None, sink=None, log_every=0, log=None):
        n_steps = self.sched.total - self.step if n_steps is None else n_steps
        for _ in range(n_steps):
            rec = self.train_step()
            if sink is not None:
                sink.write(rec.line() + "\n")
            if log and log_every and rec.step % log_every == 0:
                log(rec)
        return self.history

    def teacher_tensors(self):
        t = self.teacher.model
        return {**ckpt.module_tensors(t.encoder, "slide/"), **ckpt.module_tensors(t.head, "proj/")}

    def state_tensors(self):
        out = {
            **ckpt.module_tensors(self.student.encoder, "slide/"),
            **ckpt.module_tensors(self.student.head, "proj/"),
            **{"teacher/" + k: v for k, v in self.teacher_tensors().items()},
            "ssl/center_cls": self.teacher.center_cls,
            "ssl/center_patch": self.teacher.center_patch,
            "clk/step": np.array([self.step], dtype=np.float32),
            "clk/opt_t": np.array([self.opt.t], dtype=np.float32),
        }
        for k, m in self.opt.m.items():
            out["opt/m/" + k] = m
            out["opt/v/" + k] = self.opt.v[k]
        return out


def teacher_cls_embeddings(encoder: SlideEncoder, grids, dtype=torch.float64, cap=None,
                           seed=0):
    """CLS embeddings of whole grids (eval mode, valid tokens only)."""
    from .encoder import tokens_from_view
    from .views import cap_tokens, full_view

    encoder.eval()
    out = []
    with torch.no_grad():
        for i, g in enumerate(grids):
            view = full_view(g)
            keep = None
            if cap is not None and view.n_valid > cap:
                keep = cap_tokens(view.n_valid, cap, rngmod.stream(seed, "embed-cap", i))
            cls, _ = encoder(tokens_from_view(view, keep, dtype))
            out.append(cls[0])
    return torch.stack(out)
