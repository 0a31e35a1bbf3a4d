import io
import math

import numpy as np
import pytest
import torch

from fdcheck import max_rel_error, primitive_cases, primitive_error, randn
from pathcase.nn import (
    OptState, adamw_step, clip_global_norm, cosine_schedule, dtype_for, grad, linear_warmup,
)
from pathcase.nn import checkpoint as ckpt
from pathcase.nn import functional as F


@pytest.mark.parametrize("name", sorted(primitive_cases()))
def test_primitive_gradient_matches_finite_differences(name):
    assert primitive_error(name) < 1e-6


def test_square_gradient():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    assert grad(x * x, [x])[0].item() == 6.0


def test_softmax_sum_has_zero_gradient():
    x = randn(5).requires_grad_(True)
    assert torch.all(torch.abs(grad(F.softmax(x).sum(), [x])[0]) < 1e-15)


def test_unreached_parameter_gets_zero_gradient():
    a, b = randn(3).requires_grad_(True), randn(3).requires_grad_(True)
    ga, gb = grad((a * a).sum(), {"a": a, "b": b}).values()
    assert torch.equal(gb, torch.zeros(3, dtype=torch.float64))
    assert torch.allclose(ga, 2 * a)


def test_non_scalar_loss_rejected():
    a = randn(3).requires_grad_(True)
    with pytest.raises(ValueError, match="scalar"):
        grad(a * 2, [a])


def test_softmax_masked_entry():
    out = F.softmax(torch.zeros(2, dtype=torch.float64),
                    torch.tensor([0.0, -math.inf], dtype=torch.float64))
    assert out.tolist() == [1.0, 0.0]


@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-12), (torch.float32, 1e-6)])
def test_softmax_rows_sum_to_one(dtype, tol):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(50, 9, generator=g, dtype=dtype) * 10
    bias = torch.where(torch.rand(50, 9, generator=g) < 0.3, -math.inf, 0.0).to(dtype)
    bias[:, 0] = 0.0
    p = F.softmax(x, bias)
    assert torch.all(torch.abs(p.sum(-1) - 1) < tol)
    assert torch.all(p[torch.isinf(bias)] == 0)


def test_fully_masked_row_is_zero_not_nan():
    p = F.softmax(torch.zeros(3, dtype=torch.float64), torch.full((3,), -math.inf))
    assert p.tolist() == [0.0, 0.0, 0.0]


def test_softmax_bias_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(4,\).*\(3,\)"):
        F.softmax(torch.zeros(3), torch.zeros(4))


def test_layer_norm_of_constant_is_zero():
    assert torch.equal(F.layer_norm(torch.full((6,), 3.5, dtype=torch.float64)),
                       torch.zeros(6, dtype=torch.float64))


def test_gelu_exact_form():
    assert F.gelu(torch.tensor(0.0)).item() == 0.0
    x = torch.tensor([1.0, -2.0], dtype=torch.float64)
    expected = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x.tolist()]
    assert F.gelu(x).tolist() == pytest.approx(expected, abs=1e-15)


def test_l2_normalize_guards_zero():
    assert torch.equal(F.l2_normalize(torch.zeros(4, dtype=torch.float64)),
                       torch.zeros(4, dtype=torch.float64))
    v = F.l2_normalize(randn(4, 7))
    assert torch.allclose(v.norm(dim=-1), torch.ones(4, dtype=torch.float64), atol=1e-15)


def test_log_sigmoid_stable_and_consistent():
    x = torch.tensor([-800.0, -3.0, 0.0, 3.0, 800.0], dtype=torch.float64)
    out = F.log_sigmoid(x)
    assert torch.isfinite(out).all()
    assert torch.allclose(out[1:4], torch.log(torch.sigmoid(x[1:4])), atol=1e-15)
    assert out[0].item() == -800.0


def test_linear_and_matmul_shape_errors():
    with pytest.raises(ValueError, match="linear"):
        F.linear(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(ValueError, match=r"\(2, 3\) @ \(4, 5\)"):
        F.matmul(torch.zeros(2, 3), torch.zeros(4, 5))


def test_dropout_and_drop_path_identity_in_eval():
    x = randn(4, 5)
    assert F.dropout(x, 0.5, False) is x
    assert F.drop_path(x, 0.5, False) is x


def test_drop_path_gates_whole_samples():
    torch.manual_seed(0)
    y = F.drop_path(torch.ones(200, 3, 4, dtype=torch.float64), 0.5, True)
    per_sample = y.reshape(200, -1)
    assert set(per_sample.unique().tolist()) <= {0.0, 2.0}
    assert torch.all(per_sample.min(1).values == per_sample.max(1).values)


def test_dropout_preserves_mean():
    torch.manual_seed(0)
    y = F.dropout(torch.ones(200_000, dtype=torch.float64), 0.25, True)
    assert abs(y.mean().item() - 1.0) < 0.01


# -- optimizer ------------------------------------------------------------

def _param(v):
    return {"w": torch.tensor([v], dtype=torch.float64)}


def test_adamw_first_step_moves_by_lr():
    p = _param(1.0)
    adamw_step(p, {"w": torch.ones(1, dtype=torch.float64)},
               OptState(lr=0.01, eps=1e-12, weight_decay=0.0))
    assert p["w"].item() == pytest.approx(0.99, abs=1e-10)


def test_adamw_zero_grad_no_decay_is_noop():
    p = _param(1.0)
    adamw_step(p, {"w": torch.zeros(1, dtype=torch.float64)}, OptState(lr=0.01))
    assert p["w"].item() == 1.0


def test_adamw_pure_decoupled_decay():
    p = _param(1.0)
    adamw_step(p, {"w": torch.zeros(1, dtype=torch.float64)},
               OptState(lr=0.01, weight_decay=0.1))
    assert p["w"].item() == pytest.approx(0.999, abs=1e-15)


def test_adamw_matches_torch_reference():
    g = torch.Generator().manual_seed(0)
    w0 = torch.randn(4, 3, generator=g, dtype=torch.float64)
    ours = {"w": w0.clone()}
    ref = torch.nn.Parameter(w0.clone())
    opt = torch.optim.AdamW([ref], lr=0.05, weight_decay=0.3, eps=1e-8)
    state = OptState(lr=0.05, weight_decay=0.3)
    for _ in range(25):
        gr = torch.randn(4, 3, generator=g, dtype=torch.float64)
        ref.grad = gr.clone()
        opt.step()
        adamw_step(ours, {"w": gr}, state)
    assert torch.allclose(ours["w"], ref.detach(), atol=1e-13, rtol=0)


def test_adamw_respects_no_decay_and_missing_grads():
    p = {"a": torch.ones(2, dtype=torch.float64), "b": torch.ones(2, dtype=torch.float64)}
    z = torch.zeros(2, dtype=torch.float64)
    adamw_step(p, {"a": z, "b": None}, OptState(lr=0.1, weight_decay=0.5), no_decay={"a"})
    assert p["a"].tolist() == [1.0, 1.0] and p["b"].tolist() == [1.0, 1.0]


def test_adamw_trajectory_is_bitwise_reproducible():
    def run():
        g = torch.Generator().manual_seed(1)
        p = {"w": torch.randn(5, generator=g, dtype=torch.float64)}
        s = OptState(lr=0.1, weight_decay=0.05)
        for _ in range(30):
            adamw_step(p, {"w": torch.sin(p["w"] * 3)}, s)
        return p["w"].numpy().tobytes()
    assert run() == run()


def test_clip_unchanged_below_threshold():
    g = {"a": torch.tensor([3.0, 4.0], dtype=torch.float64)}
    out, norm = clip_global_norm(g, 10.0)
    assert norm == 5.0 and out["a"].tolist() == [3.0, 4.0]


def test_clip_scales_to_max_norm():
    out, _ = clip_global_norm({"a": torch.tensor([3.0, 4.0], dtype=torch.float64)}, 1.0)
    assert out["a"].tolist() == pytest.approx([0.6, 0.8], abs=1e-15)


def test_clip_global_across_tensors_and_zero():
    out, norm = clip_global_norm({"a": torch.tensor([3.0]), "b": torch.tensor([4.0]),
                                  "c": None}, 2.5)
    assert norm == 5.0 and out["a"].item() == pytest.approx(1.5) and out["c"] is None
    z, n = clip_global_norm({"a": torch.zeros(3)}, 1.0)
    assert n == 0.0 and z["a"].tolist() == [0.0, 0.0, 0.0]


# -- schedules ------------------------------------------------------------

def test_cosine_schedule_endpoints_exact():
    assert cosine_schedule(0, 100, 10, 0.0, 1e-3, 1e-6) == 0.0
    assert cosine_schedule(10, 100, 10, 0.0, 1e-3, 1e-6) == 1e-3
    assert cosine_schedule(100, 100, 10, 0.0, 1e-3, 1e-6) == 1e-6


def test_cosine_schedule_midpoint_and_warmup():
    assert cosine_schedule(55, 100, 10, 0.0, 2.0, 1.0) == pytest.approx(1.5, abs=1e-15)
    assert cosine_schedule(5, 100, 10, 0.0, 2.0, 1.0) == pytest.approx(1.0, abs=1e-15)


def test_cosine_schedule_monotone_decay():
    vals = [cosine_schedule(t, 50, 5, 0.0, 1.0, 0.1) for t in range(5, 51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_cosine_schedule_domain_errors():
    with pytest.raises(ValueError):
        cosine_schedule(11, 10, 0, 0, 1, 0)
    with pytest.raises(ValueError):
        cosine_schedule(0, 10, 10, 0, 1, 0)


def test_linear_warmup_endpoint():
    assert linear_warmup(30, 30, 0.04, 0.07) == 0.07
    assert linear_warmup(0, 30, 0.04, 0.07) == 0.04
    assert linear_warmup(99, 30, 0.04, 0.07) == 0.07


def test_dtype_for():
    assert dtype_for(64) is torch.float64 and dtype_for(32) is torch.float32
    with pytest.raises(ValueError):
        dtype_for(16)


# -- checkpoint format ----------------------------------------------------

def test_checkpoint_round_trip_and_layout(tmp_path):
    tensors = {"slide/w": np.arange(6, dtype=np.float32).reshape(2, 3),
               "opt/t": np.array([3.0], np.float32), "clk/s": np.float32(1.5)}
    buf = io.BytesIO()
    ckpt.write_tensors(tensors, buf)
    data = buf.getvalue()
    assert data[:4] == b"MZCK"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == 3
    back = ckpt.read_tensors(io.BytesIO(data))
    assert list(back) == list(tensors)
    assert np.array_equal(back["slide/w"], tensors["slide/w"])
    assert back["clk/s"].shape == ()
    ckpt.save(tmp_path / "a.mzck", tensors)
    assert np.array_equal(ckpt.load(tmp_path / "a.mzck")["opt/t"], [3.0])


def test_checkpoint_rejects_bad_magic_and_truncation():
    buf = io.BytesIO()
    ckpt.write_tensors({"a": np.ones(3, np.float32)}, buf)
    data = buf.getvalue()
    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_tensors(io.BytesIO(b"XXXX" + data[4:]))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.read_tensors(io.BytesIO(data[:-2]))


def test_module_round_trip():
    m = torch.nn.Linear(3, 2).double()
    t = ckpt.module_tensors(m, "head/x/")
    assert set(t) == {"head/x/weight", "head/x/bias"}
    m2 = torch.nn.Linear(3, 2).double()
    ckpt.load_module(m2, t, "head/x/")
    assert torch.allclose(m2.weight, m.weight.float().double())
