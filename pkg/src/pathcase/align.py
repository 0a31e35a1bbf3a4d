"""Stage-2 case-level alignment with sparse multi-task supervision.

Each case is a set of slide grids.  Slides are encoded whole (no crop
sampling), aggregated by the case transformer, and the case embedding is
routed to the heads of whichever tasks the case is labeled for.
"""

from __future__ import annotations

import copy
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import rng as rngmod
from .encoder import (
    CaseTransformer, CaseTransformerConfig, SlideEncoder, SlideEncoderConfig, TaskHead,
    no_decay_names, tokens_from_view,
)
from .metrics import weighted_f1
from .nn import OptState, adamw_step, clip_global_norm, cosine_schedule
from .nn import checkpoint as ckpt
from .nn import functional as fn
from .ssl import TrainingError
from .views import apply_spatial_augment, cap_tokens, full_view, token_dropout

ENDPOINTS = ("OS", "DSS", "DFI", "PFI")
_TASK_ID = re.compile(r"^[A-Za-z0-9_-]+$")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalBinning:
    """Quantile discretization of follow-up time.

    ``cuts`` are the interior cut-points; bin ``j`` (1-based) covers
    ``(cuts[j-2], cuts[j-1]]`` with open ends at -inf/+inf.
    """

    provisional: int
    count: int
    cuts: tuple

    def __post_init__(self):
        if self.count != len(self.cuts) + 1:
            raise ValueError(f"{len(self.cuts)} cut-points cannot give {self.count} bins")
        if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
            raise ValueError("cut-points must be strictly increasing")

    @property
    def edges(self):
        return (-math.inf, *self.cuts, math.inf)

    def bin_index(self, t) -> int:
        return int(np.searchsorted(np.asarray(self.cuts, dtype=np.float64), t, side="left")) + 1


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str
    class_names: tuple = ()
    weights: tuple | None = None
    smoothing: float = 0.0
    endpoint: str | None = None
    binning: SurvivalBinning | None = None
    head: str = "mlp"
    level: str = "case"

    def __post_init__(self):
        if not _TASK_ID.match(self.id):
            raise ValueError(f"task id {self.id!r} must be alphanumeric, '_' or '-'")
        if self.kind == "classification":
            if len(self.class_names) < 2:
                raise ValueError(f"task {self.id}: classification needs >= 2 classes")
        elif self.kind == "survival":
            if self.endpoint not in ENDPOINTS:
                raise ValueError(f"task {self.id}: endpoint must be one of {ENDPOINTS}")
            if self.binning is not None and not 2 <= self.binning.count <= 16:
                raise ValueError(f"task {self.id}: bin count {self.binning.count} not in [2, 16]")
        else:
            raise ValueError(f"task {self.id}: unknown kind {self.kind!r}")

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def out_dim(self):
        if self.kind == "classification":
            return self.n_classes
        if self.binning is None:
            raise ValueError(f"task {self.id}: survival bins not fitted yet")
        return self.binning.count


@dataclass(frozen=True)
class CaseRecord:
    """``labels`` maps task id to a class index or a ``(time, event)`` pair."""

    case_id: str
    slides: tuple
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.slides:
            raise ValueError(f"case {self.case_id} has no slides")
        for task, y in self.labels.items():
            if isinstance(y, tuple) and (y[0] < 0 or y[1] not in (0, 1)):
                raise ValueError(f"case {self.case_id}, task {task}: bad survival label {y}")


# -- losses ---------------------------------------------------------------

def class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * n_k)``."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if len(counts) > n_classes:
        raise ValueError(f"label {labels.max()} out of range for {n_classes} classes")
    for k, c in enumerate(counts):
        if c == 0:
            raise ValueError(f"class {k} has no samples")
    return len(labels) / (n_classes * counts.astype(np.float64))


def smoothed_weighted_ce(logits, y, weights, eps: float):
    """Label-smoothed cross-entropy scaled by the true-class weight.

    ``logits`` is ``(K,)`` with an int label, or ``(B, K)`` with ``(B,)``
    labels; batches reduce as ``sum(w_y * l) / sum(w_y)``.
    """
    K = logits.shape[-1]
    weights = torch.as_tensor(np.asarray(weights, dtype=np.float64), dtype=logits.dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    target = torch.full(logits.shape, eps / K, dtype=logits.dtype)
    target = target + (1.0 - eps) * torch.nn.functional.one_hot(y, K).to(logits.dtype)
    per = -(target * fn.log_softmax(logits)).sum(-1)
    w = weights[y]
    if logits.ndim == 1:
        return w * per
    return (w * per).sum() / w.sum()


def survival_bin_count(n_events: int, b_min: int, b_target: int, b_max: int) -> int:
    if not 1 <= b_min <= b_target <= b_max:
        raise ValueError(f"need 1 <= b_min <= b_target <= b_max, got {b_min}, {b_target}, {b_max}")
    if n_events < b_target:
        return max(b_min, max(1, n_events))
    return min(b_max, b_target + (n_events - b_target) // (3 * b_target))


def survival_bin_edges(event_times, provisional: int, b_min: int | None = None) -> SurvivalBinning:
    """Equally spaced quantile cut-points of event times, ties merged.

    With ``b_min`` set, a binning that collapsed below it is split at
    range midpoints until it has ``b_min`` bins.
    """
    times = np.asarray(event_times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("need at least one event time")
    q = np.arange(1, provisional) / provisional
    # a cut at the largest time would leave an empty final interval
    cuts = sorted(c for c in set(np.quantile(times, q, method="linear").tolist())
                  if c < times.max())
    if b_min is not None:
        while len(cuts) + 1 < b_min:
            points = [times.min(), *cuts, times.max()]
            gaps = np.diff(points)
            i = int(np.argmax(gaps))
            mid = 0.5 * (points[i] + points[i + 1])
            if mid in cuts:
                mid = float(np.nextafter(max(cuts), np.inf))
            cuts = sorted(set(cuts) | {float(mid)})
    return SurvivalBinning(provisional, len(cuts) + 1, tuple(float(c) for c in cuts))


def survival_nll(hazard_logits, j: int, event: int):
    """Discrete-time hazard NLL for bin ``j`` (1-based)."""
    B = hazard_logits.shape[-1]
    if not 1 <= j <= B:
        raise ValueError(f"bin index {j} outside 1..{B}")
    log_surv = fn.log_sigmoid(-hazard_logits)
    if event:
        return -(log_surv[: j - 1].sum() + fn.log_sigmoid(hazard_logits[j - 1]))
    return -log_surv[:j].sum()


def risk_score(hazard_logits):
    """Cumulative hazard ``-sum log(1 - h_k)``."""
    return -fn.log_sigmoid(-hazard_logits).sum(-1)


def multitask_loss(losses: dict):
    """Mean over the tasks present in ``losses``; ``None`` means skip (no active task)."""
    if not losses:
        return None
    return sum(losses.values()) / len(losses)


# -- data plumbing --------------------------------------------------------

def stratified_holdout(cases, tasks, fraction: float, rng):
    """Hold out about ``fraction`` of each task's labeled cases, stratified by
    class (classification) or event indicator (survival).

    A held-out case leaves training for every task.  Returns
    ``(train, validation)`` over the cases carrying at least one label.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    labeled = [c for c in cases if c.labels]
    held: set = set()
    for task in tasks:
        strata: dict = {}
        for c in labeled:
            if task.id in c.labels:
                y = c.labels[task.id]
                key = int(y[1]) if task.kind == "survival" else int(y)
                strata.setdefault(key, []).append(c.case_id)
        n = sum(len(v) for v in strata.values())
        if n < 2:
            continue
        target = max(1, math.floor(fraction * n + 0.5))
        keys = sorted(strata)
        exact = np.array([fraction * len(strata[k]) for k in keys]) * target / (fraction * n)
        quota = np.floor(exact).astype(int)
        order = np.argsort(-(exact - quota) + 1e-9 * rng.random(len(keys)), kind="stable")
        for i in order[: target - quota.sum()]:
            quota[i] += 1
        for k, q in zip(keys, quota):
            ids = strata[k]
            already = sum(1 for i in ids if i in held)
            free = [i for i in ids if i not in held]
            need = min(max(0, q - already), len(free))
            if need:
                held.update(free[i] for i in rng.choice(len(free), need, replace=False))
    train = [c for c in labeled if c.case_id not in held]
    val = [c for c in labeled if c.case_id in held]
    return train, val


def _fields(line):
    return line.split("#", 1)[0].split()


def parse_task_manifest(text: str) -> list:
    tasks, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        f = _fields(line)
        if not f:
            continue
        try:
            if f[0] != "task" or len(f) < 4:
                raise ValueError("expected 'task <id> classification|survival ...'")
            tid, kind = f[1], f[2]
            if tid in seen:
                raise ValueError(f"duplicate task {tid}")
            if kind == "classification":
                K = int(f[3])
                names = tuple(f[4:]) or tuple(str(k) for k in range(K))
                if len(names) != K:
                    raise ValueError(f"task {tid}: {K} classes but {len(names)} names")
                tasks.append(TaskSpec(tid, kind, names))
            elif kind == "survival":
                if len(f) != 4:
                    raise ValueError("expected 'task <id> survival <endpoint>'")
                tasks.append(TaskSpec(tid, kind, endpoint=f[3]))
            else:
                raise ValueError(f"unknown task kind {kind!r}")
            seen.add(tid)
        except ValueError as e:
            raise ManifestError(f"task manifest line {lineno}: {e}") from None
    return tasks


def parse_case_manifest(text: str, tasks) -> list:
    registry = {t.id: t for t in tasks}
    slides, labels, order = {}, {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        f = _fields(line)
        if not f:
            continue
        try:
            if f[0] == "case":
                if len(f) < 4 or f[2] != "slides":
                    raise ValueError("expected 'case <id> slides <grid-file...>'")
                if f[1] in slides:
                    raise ValueError(f"duplicate case {f[1]}")
                slides[f[1]] = tuple(f[3:])
                labels[f[1]] = {}
                order.append(f[1])
            elif f[0] == "label":
                if len(f) < 4:
                    raise ValueError("expected 'label <case> <task> <value...>'")
                cid, tid = f[1], f[2]
                if cid not in slides:
                    raise ValueError(f"label for undeclared case {cid}")
                task = registry.get(tid)
                if task is None:
                    raise ValueError(f"unknown task {tid}")
                if tid in labels[cid]:
                    raise ValueError(f"case {cid} labeled twice for task {tid}")
                if task.kind == "classification":
                    if len(f) != 4:
                        raise ValueError("classification label takes one class index")
                    y = int(f[3])
                    if not 0 <= y < task.n_classes:
                        raise ValueError(f"class index {y} out of range for task {tid}")
                else:
                    if len(f) != 5:
                        raise ValueError("survival label takes <time> <event>")
                    y = (float(f[3]), int(f[4]))
                    if y[0] < 0 or y[1] not in (0, 1):
                        raise ValueError(f"bad survival label {f[3]} {f[4]}")
                labels[cid][tid] = y
            else:
                raise ValueError(f"unknown record {f[0]!r}")
        except ValueError as e:
            raise ManifestError(f"case manifest line {lineno}: {e}") from None
    return [CaseRecord(c, slides[c], labels[c]) for c in order]


def format_task_manifest(tasks) -> str:
    lines = []
    for t in tasks:
        if t.kind == "classification":
            lines.append(f"task {t.id} classification {t.n_classes} {' '.join(t.class_names)}")
        else:
            lines.append(f"task {t.id} survival {t.endpoint}")
    return "\n".join(lines) + "\n"


def format_case_manifest(cases) -> str:
    lines = [f"case {c.case_id} slides {' '.join(c.slides)}" for c in cases]
    for c in cases:
        for tid, y in c.labels.items():
            v = f"{y[0]!r} {y[1]}" if isinstance(y, tuple) else str(y)
            lines.append(f"label {c.case_id} {tid} {v}")
    return "\n".join(lines) + "\n"


def fit_tasks(tasks, train_cases, smoothing=0.03, bins=(2, 8, 16), head="mlp") -> list:
    """Fill class weights and survival binning from the training cases."""
    out = []
    for t in tasks:
        ys = [c.labels[t.id] for c in train_cases if t.id in c.labels]
        if t.kind == "classification":
            w = class_weights([int(y) for y in ys], t.n_classes) if ys else np.ones(t.n_classes)
            out.append(replace(t, weights=tuple(w.tolist()), smoothing=smoothing, head=head))
        else:
            events = [y[0] for y in ys if y[1] == 1]
            if not events:
                raise ValueError(f"task {t.id}: no training events to place bin edges")
            b_hat = survival_bin_count(len(events), *bins)
            binning = survival_bin_edges(events, b_hat, b_min=bins[0])
            out.append(replace(t, binning=binning, head=head))
    return out


# -- model and training ---------------------------------------------------

@dataclass(frozen=True)
class AlignConfig:
    lr: float = 5e-5
    min_lr: float = 2e-7
    weight_decay: float = 0.4
    clip: float = 0.3
    micro_batch: int = 1
    accum_steps: int = 128
    epochs: int = 12
    token_dropout: float = 0.1
    smoothing: float = 0.03
    bins: tuple = (2, 8, 16)
    val_fraction: float = 0.05
    token_cap: int = 1024
    head: str = "mlp"
    head_dropout: float = 0.1
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5

    @property
    def cases_per_step(self):
        return self.micro_batch * self.accum_steps


class AlignModel(nn.Module):
    def __init__(self, enc_cfg: SlideEncoderConfig, case_cfg: CaseTransformerConfig, tasks,
                 head="mlp", head_dropout=0.1):
        super().__init__()
        self.encoder = SlideEncoder(enc_cfg)
        self.aggregator = CaseTransformer(enc_cfg.dim, case_cfg)
        self.heads = nn.ModuleDict({
            t.id: TaskHead(enc_cfg.dim, t.out_dim, t.head or head, head_dropout) for t in tasks
        })


def slide_tokens(grid, cfg: AlignConfig, rng, train: bool, dtype):
    view = full_view(grid)
    if train:
        view = apply_spatial_augment(view, cfg.p_hflip, cfg.p_vflip, cfg.p_rotate, rng)
        view = token_dropout(view, cfg.token_dropout, rng)
    keep = None
    if view.n_valid > cfg.token_cap:
        keep = cap_tokens(view.n_valid, cfg.token_cap, rng)
    return tokens_from_view(view, keep, dtype)


def case_embedding(model: AlignModel, grids, cfg: AlignConfig, rng, train: bool = False):
    dtype = model.aggregator.case_token.dtype
    cls = [
        model.encoder(slide_tokens(g, cfg, rngmod.child(rng, "slide", i), train, dtype))[0][0]
        for i, g in enumerate(grids)
    ]
    return model.aggregator(torch.stack(cls))


def task_loss(task: TaskSpec, out, y):
    if task.kind == "classification":
        return smoothed_weighted_ce(out, int(y), task.weights, task.smoothing)
    return survival_nll(out, task.binning.bin_index(y[0]), y[1])


def case_losses(model: AlignModel, h, case: CaseRecord, tasks) -> dict:
    return {t.id: task_loss(t, model.heads[t.id](h), case.labels[t.id])
            for t in tasks if t.id in case.labels}


@dataclass
class AlignRecord:
    step: int
    loss: float
    cases: int
    skipped: int
    lr: float

    def line(self):
        return f"{self.step},{self.loss!r},{self.cases},{self.skipped},{self.lr!r}"


ALIGN_METRICS_HEADER = "step,loss,cases,skipped,lr"


def align_step(cases, grids, model: AlignModel, tasks, cfg: AlignConfig, opt: OptState,
               step: int, lr: float, rng, no_decay=frozenset()) -> AlignRecord:
    """One optimizer step over ``cases`` (already batched by the caller).

    ``grids`` maps slide references to grids.  Cases without any label
    are skipped; every other case contributes its task-mean loss equally.
    """
    torch.manual_seed(rngmod.torch_seed(rngmod.child(rng, "torch")))
    model.train()
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    registered = {t.id for t in tasks}
    active = [c for c in cases if any(k in registered for k in c.labels)]
    total = 0.0
    for i, case in enumerate(active):
        h = case_embedding(model, [grids[s] for s in case.slides], cfg,
                           rngmod.child(rng, "case", i), train=True)
        loss = multitask_loss(case_losses(model, h, case, tasks))
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss for case {case.case_id}: {float(loss.detach())}")
        (loss / len(active)).backward()
        total += loss.item() / len(active)
    if active:
        grads = {k: p.grad for k, p in params.items()}
        grads, _ = clip_global_norm(grads, cfg.clip)
        opt.lr, opt.weight_decay = lr, cfg.weight_decay
        adamw_step(params, grads, opt, no_decay)
    return AlignRecord(step, total, len(active), len(cases) - len(active), lr)


@torch.no_grad()
def evaluate(model: AlignModel, cases, grids, tasks, cfg: AlignConfig, seed=0) -> dict:
    """Per-task validation loss plus weighted F1 (classification) or mean NLL (survival)."""
    model.eval()
    outs = {t.id: [] for t in tasks}
    for case in cases:
        h = case_embedding(model, [grids[s] for s in case.slides], cfg,
                           rngmod.stream(seed, "eval", case.case_id))
        for t in tasks:
            if t.id in case.labels:
                outs[t.id].append((model.heads[t.id](h), case.labels[t.id]))
    report = {}
    for t in tasks:
        pairs = outs[t.id]
        if not pairs:
            continue
        losses = [float(task_loss(t, o, y)) for o, y in pairs]
        entry = {"loss": float(np.mean(losses)), "n": len(pairs)}
        if t.kind == "classification":
            pred = [int(torch.argmax(o)) for o, _ in pairs]
            entry["weighted_f1"] = weighted_f1([int(y) for _, y in pairs], pred)
        else:
            entry["nll"] = entry["loss"]
        report[t.id] = entry
    return report


def selection_score(report: dict) -> float:
    """Mean validation loss across tasks; lower is better."""
    return float(np.mean([e["loss"] for e in report.values()])) if report else math.inf


class Aligner:
    """Stage-2 fine-tuning from a Stage-1 teacher checkpoint."""

    def __init__(self, tasks, cases, grids, enc_cfg: SlideEncoderConfig,
                 case_cfg: CaseTransformerConfig, cfg: AlignConfig, seed=0,
                 dtype=torch.float64, teacher=None):
        self.cfg = cfg
        self.seed = seed
        self.grids = grids
        self.train_cases, self.val_cases = stratified_holdout(
            cases, tasks, cfg.val_fraction, rngmod.stream(seed, "holdout")
        )
        self.tasks = fit_tasks(tasks, self.train_cases, cfg.smoothing, cfg.bins, cfg.head)
        torch.manual_seed(rngmod.torch_seed(rngmod.stream(seed, "init")))
        self.model = AlignModel(enc_cfg, case_cfg, self.tasks, cfg.head, cfg.head_dropout).to(dtype)
        if teacher is not None:
            ckpt.load_module(self.model.encoder, teacher, "slide/")
        self.no_decay = no_decay_names(self.model)
        self.opt = OptState()
        self.steps_per_epoch = max(1, math.ceil(len(self.train_cases) / cfg.cases_per_step))
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.step = 0
        self.history: list = []
        self.validation: list = []
        self.best = None

    def lr(self, t):
        return cosine_schedule(t, self.total_steps, 0, self.cfg.lr, self.cfg.lr, self.cfg.min_lr)

    def run_epoch(self, epoch: int, sink=None):
        n = self.cfg.cases_per_step
        perm = rngmod.stream(self.seed, "epoch", epoch).permutation(len(self.train_cases))
        for pos in range(self.steps_per_epoch):
            chunk = [self.train_cases[j] for j in perm[pos * n:(pos + 1) * n]]
            rec = align_step(chunk, self.grids, self.model, self.tasks, self.cfg, self.opt,
                             self.step, self.lr(self.step),
                             rngmod.stream(self.seed, "step", self.step), self.no_decay)
            self.history.append(rec)
            if sink is not None:
                sink.write(rec.line() + "\n")
            self.step += 1

    def run(self, sink=None, log=None):
        """Train all epochs; keeps the weights of the epoch with the best validation score."""
        for epoch in range(self.cfg.epochs):
            self.run_epoch(epoch, sink)
            if self.val_cases:
                report = evaluate(self.model, self.val_cases, self.grids, self.tasks, self.cfg,
                                  self.seed)
                score = selection_score(report)
                self.validation.append((epoch, score, report))
                if self.best is None or score < self.best[1]:
                    self.best = (epoch, score, copy.deepcopy(self.model.state_dict()))
                if log:
                    log(epoch, score, report)
        if self.best is not None:
            self.model.load_state_dict(self.best[2])
        return self.history

    def tensors(self) -> dict:
        out = {
            **ckpt.module_tensors(self.model.encoder, "slide/"),
            **ckpt.module_tensors(self.model.aggregator, "case/"),
        }
        for t in self.tasks:
            out.update(ckpt.module_tensors(self.model.heads[t.id], f"head/{t.id}/"))
            if t.kind == "classification":
                out[f"task/{t.id}/weights"] = np.asarray(t.weights, dtype=np.float32)
            else:
                out[f"task/{t.id}/cuts"] = np.asarray(t.binning.cuts, dtype=np.float32)
        return out


@torch.no_grad()
def embed_cases(model: AlignModel, cases, grids, cfg: AlignConfig, seed=0) -> np.ndarray:
    """Frozen case embeddings (eval mode); token capping uses per-case fixed streams."""
    model.eval()
    return np.stack([
        case_embedding(model, [grids[s] for s in c.slides], cfg,
                       rngmod.stream(seed, "eval", c.case_id)).numpy()
        for c in cases
    ])
