"""Central finite-difference oracle for reverse-mode gradients."""

import numpy as np
import torch

from pathcase.nn import grad

STEP = 1e-5


def fd_grad(scalar_fn, tensors, index_sets=None, step=STEP):
    """Central differences of ``scalar_fn()`` w.r.t. entries of ``tensors``.

    ``index_sets`` optionally restricts each tensor to a list of flat indices.
    Returns one dict ``{flat_index: derivative}`` per tensor.
    """
    out = []
    for n, t in enumerate(tensors):
        flat = t.data.view(-1)
        idx = range(flat.numel()) if index_sets is None else index_sets[n]
        d = {}
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(scalar_fn())
            flat[i] = orig - step
            down = float(scalar_fn())
            flat[i] = orig
            d[int(i)] = (up - down) / (2 * step)
        out.append(d)
    return out


def max_rel_error(scalar_fn, tensors, index_sets=None, step=STEP):
    """Largest ``|autodiff - fd| / max(1, |fd|)`` over the checked entries."""
    tensors = list(tensors)
    for t in tensors:
        t.requires_grad_(True)
    analytic = grad(scalar_fn(), tensors)
    numeric = fd_grad(lambda: _no_grad(scalar_fn), tensors, index_sets, step)
    worst = 0.0
    for a, num in zip(analytic, numeric):
        a = a.detach().reshape(-1)
        for i, fd in num.items():
            worst = max(worst, abs(a[i].item() - fd) / max(1.0, abs(fd)))
    return worst


def _no_grad(fn):
    with torch.no_grad():
        return fn()


def projected(fn, seed=0):
    """Wrap a tensor-valued ``fn`` into a scalar by a fixed random projection."""
    cache = {}

    def scalar():
        y = fn()
        if "w" not in cache:
            g = torch.Generator().manual_seed(seed)
            cache["w"] = torch.randn(y.shape, generator=g, dtype=y.dtype)
        return (y * cache["w"]).sum()

    return scalar


def sample_indices(tensors, n, rng):
    """Up to ``n`` random flat indices per tensor."""
    return [rng.choice(t.numel(), min(n, t.numel()), replace=False).tolist() for t in tensors]


def randn(*shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(size=shape), dtype=torch.float64)


def _seeded(fn, seed=7):
    def run(*xs):
        torch.manual_seed(seed)
        return fn(*xs)
    return run


def primitive_cases():
    """``name -> (function, input tensors)`` covering every primitive the encoders use."""
    from pathcase.nn import functional as F

    pos = lambda *s, seed=0: randn(*s, seed=seed).abs() + 0.5  # noqa: E731
    bias = torch.zeros(3, 4, dtype=torch.float64)
    bias[0, 1] = bias[2, 3] = float("-inf")
    bias[1, 2] = -0.7
    idx = torch.tensor([2, 0, 2, 4])
    return {
        "add": (lambda a, b: a + b, [randn(3, 4), randn(3, 4, seed=1)]),
        "sub": (lambda a, b: a - b, [randn(3, 4), randn(4, seed=1)]),
        "mul": (lambda a, b: a * b, [randn(3, 4), randn(3, 4, seed=1)]),
        "div": (lambda a, b: a / b, [randn(3, 4), pos(3, 4, seed=1)]),
        "matmul": (F.matmul, [randn(3, 5), randn(5, 2, seed=1)]),
        "linear": (F.linear, [randn(3, 5), randn(4, 5, seed=1), randn(4, seed=2)]),
        "transpose": (lambda a: a.transpose(0, 1) * torch.arange(12.0).reshape(4, 3),
                      [randn(3, 4)]),
        "reshape": (lambda a: a.reshape(2, 6) ** 2, [randn(3, 4)]),
        "concat": (lambda a, b: torch.cat([a, b * 2], 0) ** 2, [randn(2, 3), randn(1, 3, seed=1)]),
        "slice": (lambda a: a[1:, ::2] ** 3, [randn(3, 4)]),
        "exp": (torch.exp, [randn(3, 4)]),
        "log": (torch.log, [pos(3, 4)]),
        "sqrt": (torch.sqrt, [pos(3, 4)]),
        "gelu": (F.gelu, [randn(3, 4) * 2]),
        "sigmoid": (F.sigmoid, [randn(3, 4) * 2]),
        "log_sigmoid": (F.log_sigmoid, [randn(3, 4) * 3]),
        "softmax": (lambda a: F.softmax(a), [randn(3, 4)]),
        "softmax_bias": (lambda a: F.softmax(a, bias), [randn(3, 4)]),
        "log_softmax": (F.log_softmax, [randn(3, 4)]),
        "layer_norm": (F.layer_norm, [randn(3, 6), randn(6, seed=1), randn(6, seed=2)]),
        "l2_normalize": (F.l2_normalize, [randn(3, 5)]),
        "sum": (lambda a: a.sum(0) ** 2, [randn(3, 4)]),
        "mean": (lambda a: a.mean(-1) ** 2, [randn(3, 4)]),
        "max": (lambda a: a.amax(-1), [randn(3, 4)]),
        "dropout": (_seeded(lambda a: F.dropout(a, 0.3, True)), [randn(6, 5)]),
        "drop_path": (_seeded(lambda a: F.drop_path(a, 0.4, True)), [randn(6, 3, 2)]),
        "embedding": (lambda t: F.embedding(t, idx) ** 2, [randn(5, 3)]),
    }


def primitive_error(name):
    fn, inputs = primitive_cases()[name]
    inputs = [x.clone() for x in inputs]
    return max_rel_error(projected(lambda: fn(*inputs), seed=3), inputs)


def _tiny_corpus(n, seed, size=6, d=3):
    from pathcase.grid import FeatureGrid

    r = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        valid = r.random((size, size)) < 0.8
        valid[0, 0] = True
        feats = r.normal(size=(size, size, d)).astype(np.float32)
        feats[~valid] = 0
        out.append(FeatureGrid(feats, valid, 224.0))
    return out


def _tiny_encoder_config(d=3):
    from pathcase.encoder import SlideEncoderConfig

    return SlideEncoderConfig(d_patch=d, dim=8, heads=2, layers=2, ffn_dim=12, registers=1,
                              mlp_dropout=0.0, attn_dropout=0.0, drop_path=0.0)


def ssl_objective_error(seed=0, per_param=6):
    """FD check of the self-distillation objective (CLS + masked-patch terms) w.r.t.
    every student parameter tensor, sampling ``per_param`` entries of each."""
    from pathcase import rng as rngmod
    from pathcase.encoder import ProjectionConfig
    from pathcase.ssl import SSLConfig, SSLModel, TeacherState, _micro_batch_loss
    from pathcase.views import ViewConfig

    torch.manual_seed(seed)
    student = SSLModel(_tiny_encoder_config(), ProjectionConfig(10, 6, 7)).double()
    with torch.no_grad():
        # O(1) bottleneck norms keep the L2 step well conditioned for a 1e-5 stencil
        for m in (student.head.fc1, student.head.fc2, student.head.fc3):
            m.weight.mul_(25.0)
    teacher = TeacherState.from_student(student)
    with torch.no_grad():
        for p in teacher.model.parameters():
            p.add_(0.05 * torch.randn_like(p))
    teacher.center_cls = randn(7, seed=1) * 0.1
    teacher.center_patch = randn(7, seed=2) * 0.1
    # momentum 1 keeps the centers fixed across the repeated forward passes
    cfg = SSLConfig(center_momentum=1.0, student_temp=0.2)
    vcfg = ViewConfig(n_global=2, global_size=4, n_local=2, local_size=3, mask_prob=1.0)
    grids = _tiny_corpus(2, seed)
    temps = {"cls": 0.1, "patch": 0.12}

    def objective():
        l_c, l_m, _ = _micro_batch_loss(grids, student, teacher, cfg, vcfg, temps,
                                        rngmod.stream(seed, "views"), 0)
        assert l_m.item() > 0
        return l_c + l_m

    params = list(student.parameters())
    idx = sample_indices(params, per_param, np.random.default_rng(seed))
    return max_rel_error(objective, params, idx)


def align_objective_error(kind, seed=0, per_param=6):
    """FD check of the Stage-2 classification (smoothed weighted CE) or survival
    (hazard NLL) objective through encoder, case transformer and task head."""
    from pathcase import rng as rngmod
    from pathcase.align import (
        AlignConfig, AlignModel, SurvivalBinning, TaskSpec, case_embedding,
        smoothed_weighted_ce, survival_nll,
    )
    from pathcase.encoder import CaseTransformerConfig

    if kind == "classification":
        task = TaskSpec("t", kind, ("a", "b", "c"), weights=(0.5, 1.5, 1.0), smoothing=0.03)
    else:
        task = TaskSpec("t", "survival", endpoint="OS",
                        binning=SurvivalBinning(4, 4, (1.0, 2.0, 3.0)))
    torch.manual_seed(seed)
    case_cfg = CaseTransformerConfig(layers=1, heads=2, ffn_dim=12, dropout=0.0, layerscale=0.5)
    model = AlignModel(_tiny_encoder_config(), case_cfg, [task]).double()
    model.eval()
    grids = _tiny_corpus(2, seed + 1)
    cfg = AlignConfig()

    def objective():
        h = case_embedding(model, grids, cfg, rngmod.stream(seed, "case"))
        out = model.heads["t"](h)
        if kind == "classification":
            return smoothed_weighted_ce(out, 1, task.weights, task.smoothing)
        return survival_nll(out, 3, 1) + survival_nll(out, 2, 0)

    params = list(model.parameters())
    idx = sample_indices(params, per_param, np.random.default_rng(seed))
    return max_rel_error(objective, params, idx)
