"""Frozen-feature probes: patient-grouped stratified folds, MLP probe, linear probe."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import minimize
from scipy.special import log_softmax as np_log_softmax, softmax as np_softmax
from torch import nn

from . import rng as rngmod
from .encoder import LayerNorm
from .metrics import compute_metrics, weighted_f1
from .nn import OptState, adamw_step
from .nn import functional as fn

METRICS = ("weighted_f1", "weighted_auc", "balanced_accuracy")
LINEAR_STRENGTHS = np.logspace(-6, 5, 45)


def round_half_up(x) -> int:
    return int(math.floor(x + 0.5))


# -- folds ----------------------------------------------------------------

@dataclass
class Fold:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass
class FoldPlan:
    k: int
    folds: list
    warnings: list = field(default_factory=list)


def _deal(groups_by_class, k, rng, offset=0):
    """Round-robin patients of each class over ``k`` bins, continuing the offset
    across classes so bin sizes stay within one of each other."""
    out = [[] for _ in range(k)]
    for cls in sorted(groups_by_class):
        members = list(groups_by_class[cls])
        for i in rng.permutation(len(members)):
            out[offset % k].append(members[i])
            offset += 1
    return out


def make_folds(labels, patient_ids, k: int, rng, val_fraction: float = 0.2) -> FoldPlan:
    """Stratified folds over patients; every case of a patient shares its fold role.

    A patient's stratum is the most frequent label among its cases.  The
    non-test patients of each fold are split 80/20 into train/validation,
    again stratified.
    """
    labels = np.asarray(labels)
    patient_ids = np.asarray(patient_ids)
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    patients = sorted(set(patient_ids.tolist()))
    if len(patients) < k:
        raise ValueError(f"{len(patients)} patients cannot fill {k} folds")
    cases_of = {p: np.flatnonzero(patient_ids == p) for p in patients}
    stratum = {p: int(np.bincount(labels[cases_of[p]]).argmax()) for p in patients}
    by_class: dict = {}
    for p in patients:
        by_class.setdefault(stratum[p], []).append(p)
    warnings = [f"class {c} has {len(v)} patients < {k} folds; stratification is best-effort"
                for c, v in sorted(by_class.items()) if len(v) < k]
    bins = _deal(by_class, k, rngmod.child(rng, "folds"))

    def cases(ps):
        return np.sort(np.concatenate([cases_of[p] for p in ps])) if ps else np.array([], int)

    folds = []
    for i in range(k):
        rest = [p for j in range(k) if j != i for p in bins[j]]
        rest_by_class: dict = {}
        for p in rest:
            rest_by_class.setdefault(stratum[p], []).append(p)
        r = rngmod.child(rng, "split", i)
        val, train = [], []
        for c in sorted(rest_by_class):
            ps = rest_by_class[c]
            order = r.permutation(len(ps))
            n_val = round_half_up(val_fraction * len(ps)) if len(ps) > 1 else 0
            val += [ps[j] for j in order[:n_val]]
            train += [ps[j] for j in order[n_val:]]
        folds.append(Fold(cases(train), cases(val), cases(bins[i])))
    return FoldPlan(k, folds, warnings)


# -- reports --------------------------------------------------------------

@dataclass
class MetricReport:
    task: str
    folds: dict = field(default_factory=lambda: {m: [] for m in METRICS})
    converged: list | None = None
    selected: list = field(default_factory=list)

    def add(self, entry: dict):
        for m in METRICS:
            self.folds[m].append(entry[m])

    def mean(self, metric):
        return float(np.mean(self.folds[metric]))

    def std(self, metric):
        return float(np.std(self.folds[metric]))

    def lines(self):
        return [
            ", ".join([self.task, m, repr(self.mean(m)), repr(self.std(m))]
                      + [repr(float(v)) for v in self.folds[m]])
            for m in METRICS
        ]


def format_table(reports) -> str:
    """Aligned text table, one row per task with mean +- std for each metric."""
    head = ["task"] + list(METRICS)
    rows = [[r.task] + [f"{r.mean(m):.4f} +- {r.std(m):.4f}" for m in METRICS] for r in reports]
    widths = [max(len(x) for x in col) for col in zip(head, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*head)] + [fmt.format(*row) for row in rows]) + "\n"


# -- MLP probe ------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    dropout: float = 0.25
    folds: int = 5
    val_fraction: float = 0.2


def hidden_sizes(dim: int):
    h1 = max(4, round_half_up(0.66 * dim))
    return h1, max(2, round_half_up(0.5 * h1))


class MlpProbe(nn.Module):
    def __init__(self, dim, n_classes, dropout=0.25):
        super().__init__()
        h1, h2 = hidden_sizes(dim)
        self.norm = LayerNorm(dim)
        self.fc1 = nn.Linear(dim, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, n_classes)
        self.dropout = dropout

    def forward(self, x):
        u = fn.dropout(fn.gelu(self.fc1(self.norm(x))), self.dropout, self.training)
        u = fn.dropout(fn.gelu(self.fc2(u)), self.dropout, self.training)
        return self.fc3(u)


def balanced_sample(labels, n_classes, rng):
    """Inverse-frequency sampling with replacement, ``len(labels)`` draws."""
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    w = np.where(counts[labels] > 0, 1.0 / counts[labels], 0.0)
    return rng.choice(len(labels), len(labels), replace=True, p=w / w.sum())


def _predict(model, x):
    model.eval()
    with torch.no_grad():
        return fn.softmax(model(x)).numpy()


def train_mlp_probe(x_tr, y_tr, x_val, y_val, n_classes, cfg: ProbeConfig, rng):
    """Train one probe; returns the state of the epoch with best validation weighted F1."""
    torch.manual_seed(rngmod.torch_seed(rngmod.child(rng, "init")))
    model = MlpProbe(x_tr.shape[1], n_classes, cfg.dropout).to(torch.float64)
    params = dict(model.named_parameters())
    no_decay = {k for k, p in params.items() if p.ndim <= 1}
    opt = OptState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    xt, yt = torch.as_tensor(x_tr), torch.as_tensor(y_tr)
    xv = torch.as_tensor(x_val)
    best, best_f1 = None, -1.0
    for epoch in range(cfg.epochs):
        r = rngmod.child(rng, "epoch", epoch)
        order = balanced_sample(y_tr, n_classes, r)
        torch.manual_seed(rngmod.torch_seed(r))
        model.train()
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss = -fn.log_softmax(model(xt[idx])).gather(1, yt[idx, None]).mean()
            grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
            with torch.no_grad():
                adamw_step(params, grads, opt, no_decay)
        if len(y_val):
            f1 = weighted_f1(y_val, _predict(model, xv).argmax(1))
        else:
            f1 = 0.0
        if f1 > best_f1:
            best_f1 = f1
            best = {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best)
    return model


def mlp_probe(features, labels, plan: FoldPlan, cfg: ProbeConfig = ProbeConfig(), seed=0,
              task="task", n_classes=None) -> MetricReport:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    K = n_classes or int(y.max()) + 1
    report = MetricReport(task)
    for i, fold in enumerate(plan.folds):
        model = train_mlp_probe(x[fold.train], y[fold.train], x[fold.val], y[fold.val], K, cfg,
                                rngmod.stream(seed, "mlp-probe", task, i))
        proba = _predict(model, torch.as_tensor(x[fold.test]))
        report.add(compute_metrics(y[fold.test], proba.argmax(1), proba, K))
    return report


# -- linear probe ---------------------------------------------------------

@dataclass
class LogisticFit:
    coef: np.ndarray
    intercept: np.ndarray
    strength: float
    converged: bool
    n_iter: int

    def proba(self, x):
        return np_softmax(x @ self.coef.T + self.intercept, axis=1)


def logistic_objective(theta, x, onehot, w, strength):
    """Weighted mean cross-entropy plus ``strength/2 * ||W||^2`` (intercepts unpenalized)."""
    N, D = x.shape
    K = onehot.shape[1]
    W = theta[: K * D].reshape(K, D)
    b = theta[K * D:]
    logp = np_log_softmax(x @ W.T + b, axis=1)
    wn = w / w.sum()
    loss = -(wn * (onehot * logp).sum(1)).sum() + 0.5 * strength * np.sum(W * W)
    resid = (np.exp(logp) - onehot) * wn[:, None]
    gW = resid.T @ x + strength * W
    gb = resid.sum(0)
    return loss, np.concatenate([gW.ravel(), gb])


def fit_logistic(x, y, n_classes, strength, sample_weight=None, max_iter=500,
                 tol=1e-6) -> LogisticFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, np.float64)
    onehot = np.eye(n_classes)[y]
    theta0 = np.zeros(n_classes * (x.shape[1] + 1))
    res = minimize(logistic_objective, theta0, args=(x, onehot, w, strength), jac=True,
                   method="L-BFGS-B", options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0})
    D = x.shape[1]
    grad_norm = float(np.abs(res.jac).max())
    return LogisticFit(res.x[: n_classes * D].reshape(n_classes, D), res.x[n_classes * D:],
                       float(strength), grad_norm <= tol, int(res.nit))


def balanced_weights(y, n_classes):
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    return len(y) / (np.count_nonzero(counts) * counts[y])


def weighted_log_loss(proba, y, w):
    p = np.clip(proba[np.arange(len(y)), y], 1e-300, None)
    return float(-(w * np.log(p)).sum() / w.sum())


def select_logistic(x_tr, y_tr, x_val, y_val, n_classes, strengths=LINEAR_STRENGTHS,
                    max_iter=500):
    """Fit every strength on train; keep the one with lowest class-weighted validation loss."""
    w_tr = balanced_weights(y_tr, n_classes)
    w_val = balanced_weights(y_val, n_classes) if len(y_val) else None
    best, best_loss = None, math.inf
    for s in strengths:
        f = fit_logistic(x_tr, y_tr, n_classes, s, w_tr, max_iter)
        if w_val is None:
            return f
        loss = weighted_log_loss(f.proba(x_val), y_val, w_val)
        if loss < best_loss:
            best, best_loss = f, loss
    return best


def linear_probe(features, labels, plan: FoldPlan, task="task", n_classes=None,
                 strengths=LINEAR_STRENGTHS, max_iter=500) -> MetricReport:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    K = n_classes or int(y.max()) + 1
    report = MetricReport(task, converged=[])
    for fold in plan.folds:
        f = select_logistic(x[fold.train], y[fold.train], x[fold.val], y[fold.val], K,
                            strengths, max_iter)
        proba = f.proba(x[fold.test])
        report.add(compute_metrics(y[fold.test], proba.argmax(1), proba, K))
        report.converged.append(f.converged)
        report.selected.append(f.strength)
    return report
