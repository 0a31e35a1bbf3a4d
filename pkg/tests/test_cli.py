import numpy as np
import pytest

from pathcase.cli import load_embeddings, run_command
from pathcase.diagnostics import read_pgm
from pathcase.nn import checkpoint as ckpt

TINY = """\
model.d_patch = 16
model.dim = 8
model.heads = 2
model.layers = 1
model.ffn_dim = 16
model.registers = 1
proj.hidden = 16
proj.bottleneck = 8
proj.prototypes = 16
ssl.global_crop = 4
ssl.local_crop = 3
ssl.micro_batch = 4
ssl.accum_steps = 1
ssl.epochs = 2
ssl.warmup_epochs = 1
ssl.temp_warmup_epochs = 1
ssl.freeze_proto_epochs = 0
case.layers = 1
case.heads = 2
case.ffn_dim = 16
align.accum_steps = 4
align.epochs = 1
align.val_fraction = 0.2
probe.epochs = 3
probe.folds = 2
diag.ks = 2,3
diag.repeats = 2
"""
SPEC = "synth.n_slides = 40\nsynth.grid_min = 4\nsynth.grid_max = 5\n"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "run.cfg").write_text(TINY)
    (root / "spec.cfg").write_text(SPEC)
    d, cfg = str(root / "data"), str(root / "run.cfg")
    steps = [
        ["synth", "--spec", str(root / "spec.cfg"), "--out", d, "--seed", "7"],
        ["pretrain", "--config", cfg, "--data", d, "--out", str(root / "ckpt"), "--steps", "2"],
        ["align", "--config", cfg, "--data", d, "--init", str(root / "ckpt/teacher.mzck"),
         "--out", str(root / "align")],
        ["embed", "--config", cfg, "--data", d, "--model", str(root / "align/model.mzck"),
         "--out", str(root / "emb")],
        ["probe", "--config", cfg, "--embeddings", str(root / "emb/emb.mzck"),
         "--labels", d + "/cases.txt", "--protocol", "mlp", "--out", str(root / "probe")],
        ["diagnose", "--config", cfg, "--embeddings", str(root / "emb/emb.mzck"), "--data", d,
         "--model", str(root / "align/model.mzck"), "--attrib", "2",
         "--out", str(root / "diag")],
    ]
    for argv in steps:
        assert run_command(argv) == 0, argv
    return root


def test_synth_outputs(pipeline):
    d = pipeline / "data"
    assert (d / "tasks.txt").exists() and (d / "cases.txt").exists()
    assert len(list((d / "grids").glob("*.mzgr"))) == 40


def test_pretrain_and_align_outputs(pipeline):
    teacher = ckpt.load(pipeline / "ckpt/teacher.mzck")
    assert any(k.startswith("slide/") for k in teacher)
    lines = (pipeline / "ckpt/metrics.txt").read_text().splitlines()
    assert len(lines) == 3
    model = ckpt.load(pipeline / "align/model.mzck")
    assert {k.split("/")[0] for k in model} == {"slide", "case", "head", "task"}
    split = (pipeline / "align/split.txt").read_text().split()
    assert "val" in split and "train" in split


def test_embeddings_cover_every_case(pipeline):
    emb = load_embeddings(pipeline / "emb/emb.mzck")
    cases = [ln.split()[1] for ln in (pipeline / "data/cases.txt").read_text().splitlines()
             if ln.startswith("case ")]
    assert sorted(emb) == sorted(cases)
    assert all(v.shape == (8,) for v in emb.values())


def test_probe_and_diagnose_outputs(pipeline):
    csv = (pipeline / "probe/report.csv").read_text().splitlines()
    assert csv and all(len(line.split(", ")) == 6 for line in csv)
    assert (pipeline / "diag/compactness.csv").read_text().startswith("threshold,rank\n")
    assert (pipeline / "diag/stability.csv").read_text().splitlines()[0] == "k,mean,std"
    pgms = sorted((pipeline / "diag").glob("attrib_*.pgm"))
    assert len(pgms) == 2 and read_pgm(pgms[0]).max() == 255


def test_pipeline_is_deterministic(pipeline, tmp_path):
    d, cfg = str(pipeline / "data"), str(pipeline / "run.cfg")
    assert run_command(["embed", "--config", cfg, "--data", d, "--model",
                        str(pipeline / "align/model.mzck"), "--out", str(tmp_path)]) == 0
    a = load_embeddings(pipeline / "emb/emb.mzck")
    b = load_embeddings(tmp_path / "emb.mzck")
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_raw_embeddings_need_no_model(pipeline, tmp_path):
    assert run_command(["embed", "--kind", "raw", "--data", str(pipeline / "data"),
                        "--out", str(tmp_path)]) == 0
    assert next(iter(load_embeddings(tmp_path / "emb.mzck").values())).shape == (16,)


def test_usage_error_exits_two(capsys):
    assert run_command(["bogus"]) == 2
    assert run_command(["pretrain", "--out", "x"]) == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("ssl.nope = 1\n")
    assert run_command(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "line 1" in capsys.readouterr().err
    assert run_command(["embed", "--data", str(tmp_path / "missing"), "--out",
                        str(tmp_path)]) == 1
