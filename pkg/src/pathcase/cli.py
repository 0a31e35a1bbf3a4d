"""Command-line entry point: synth, pretrain, align, embed, probe, diagnose."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
import torch

from . import config as C
from . import rng as rngmod
from .align import (
    ALIGN_METRICS_HEADER, AlignModel, Aligner, embed_cases, parse_case_manifest,
    parse_task_manifest,
)
from .diagnostics import (
    attribution_csv, gradxinput_map, neighborhood_stability, pca_compactness, rasterize,
    write_pgm,
)
from .encoder import SlideEncoder
from .grid import load_grid
from .io import atomic_write, write_text
from .nn import checkpoint as ckpt
from .nn import dtype_for
from .probes import format_table, linear_probe, make_folds, mlp_probe
from .ssl import METRICS_HEADER, Pretrainer
from .synth import mean_features, synth_dataset, write_corpus

log = logging.getLogger("pathcase")


def _common(p):
    p.add_argument("--config", help="key = value overrides over the full-scale defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="pathcase")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    _common(p)
    p.add_argument("--spec", help="config file with synth.* keys (defaults otherwise)")

    p = sub.add_parser("pretrain", help="Stage-1 self-distillation")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, help="override ssl.steps")

    p = sub.add_parser("align", help="Stage-2 case-level fine-tuning")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="Stage-1 teacher checkpoint")
    p.add_argument("--cases", help="case manifest (default <data>/cases.txt)")
    p.add_argument("--tasks", help="task manifest (default <data>/tasks.txt)")
    p.add_argument("--exclude", help="file of case ids to leave out of training")

    p = sub.add_parser("embed", help="export frozen case embeddings")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", help="Stage-2 model (case) or Stage-1 teacher (teacher)")
    p.add_argument("--kind", choices=("case", "teacher", "raw"), default="case")
    p.add_argument("--cases", help="case manifest (default <data>/cases.txt)")

    p = sub.add_parser("probe", help="frozen-feature probe")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="case manifest carrying labels")
    p.add_argument("--tasks", help="task manifest (default next to --labels)")
    p.add_argument("--protocol", choices=("mlp", "linear"), default="mlp")

    p = sub.add_parser("diagnose", help="embedding geometry and attribution maps")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--data", help="corpus for attribution maps")
    p.add_argument("--model", help="checkpoint holding slide/ encoder weights")
    p.add_argument("--attrib", type=int, default=0, help="number of slides to attribute")
    return parser


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _load_corpus(data, cases_path=None, tasks_path=None):
    tasks = parse_task_manifest(_read(tasks_path or os.path.join(data, "tasks.txt")))
    cases = parse_case_manifest(_read(cases_path or os.path.join(data, "cases.txt")), tasks)
    refs = sorted({s for c in cases for s in c.slides})
    grids = {r: load_grid(os.path.join(data, r)) for r in refs}
    return tasks, cases, grids


def cmd_synth(args, cfg):
    if args.spec:
        cfg = C.load_config(args.spec, cfg)
    corpus = synth_dataset(C.synth_spec(cfg), args.seed)
    write_corpus(corpus, args.out)
    log.info("wrote %d slides in %d cases to %s", len(corpus.grids), len(corpus.cases), args.out)


def cmd_pretrain(args, cfg):
    _, cases, grids = _load_corpus(args.data)
    steps = args.steps if args.steps is not None else cfg["ssl.steps"]
    pre = Pretrainer(
        [grids[r] for r in sorted(grids)], C.encoder_config(cfg), C.projection_config(cfg),
        C.ssl_config(cfg), C.view_config(cfg), seed=args.seed,
        dtype=dtype_for(cfg["model.precision"]), total_steps=steps or None,
    )
    with atomic_write(os.path.join(args.out, "metrics.txt"), "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        pre.run(sink=fh, log_every=50, log=lambda r: log.info("%s", r.line()))
    ckpt.save(os.path.join(args.out, "teacher.mzck"), pre.teacher_tensors())
    ckpt.save(os.path.join(args.out, "student.mzck"), pre.state_tensors())


def cmd_align(args, cfg):
    tasks, cases, grids = _load_corpus(args.data, args.cases, args.tasks)
    if args.exclude:
        drop = set(_read(args.exclude).split())
        cases = [c for c in cases if c.case_id not in drop]
    teacher = ckpt.load(args.init) if args.init else None
    aligner = Aligner(tasks, cases, grids, C.encoder_config(cfg), C.case_config(cfg),
                      C.align_config(cfg), seed=args.seed,
                      dtype=dtype_for(cfg["model.precision"]), teacher=teacher)
    val_lines = ["epoch,task,loss,score"]

    def on_epoch(epoch, score, report):
        log.info("epoch %d validation score %.4f", epoch, score)
        for tid, e in report.items():
            val_lines.append(f"{epoch},{tid},{e['loss']!r},{e.get('weighted_f1', e['loss'])!r}")

    with atomic_write(os.path.join(args.out, "align_metrics.txt"), "w") as fh:
        fh.write(ALIGN_METRICS_HEADER + "\n")
        aligner.run(sink=fh, log=on_epoch)
    ckpt.save(os.path.join(args.out, "model.mzck"), aligner.tensors())
    write_text(os.path.join(args.out, "validation.txt"), "\n".join(val_lines) + "\n")
    split = [f"train {c.case_id}" for c in aligner.train_cases]
    split += [f"val {c.case_id}" for c in aligner.val_cases]
    write_text(os.path.join(args.out, "split.txt"), "\n".join(split) + "\n")


def _case_model(cfg, tensors):
    model = AlignModel(C.encoder_config(cfg), C.case_config(cfg), [])
    model = model.to(dtype_for(cfg["model.precision"]))
    ckpt.load_module(model.encoder, tensors, "slide/")
    ckpt.load_module(model.aggregator, tensors, "case/")
    return model


def _slide_encoder(cfg, tensors):
    enc = SlideEncoder(C.encoder_config(cfg)).to(dtype_for(cfg["model.precision"]))
    ckpt.load_module(enc, tensors, "slide/")
    enc.eval()
    return enc


def case_features(kind, cfg, cases, grids, tensors=None, seed=0):
    """``(N, D)`` case embeddings: Stage-2 aggregator, mean teacher CLS, or mean raw features."""
    if kind == "raw":
        return np.stack([mean_features([grids[s] for s in c.slides]) for c in cases])
    if kind == "case":
        return embed_cases(_case_model(cfg, tensors), cases, grids, C.align_config(cfg), seed)
    from .ssl import teacher_cls_embeddings

    enc = _slide_encoder(cfg, tensors)
    out = []
    for c in cases:
        cls = teacher_cls_embeddings(enc, [grids[s] for s in c.slides],
                                     dtype_for(cfg["model.precision"]), cfg["align.token_cap"],
                                     seed)
        out.append(cls.mean(0).numpy())
    return np.stack(out)


def cmd_embed(args, cfg):
    _, cases, grids = _load_corpus(args.data, args.cases)
    if args.kind != "raw" and not args.model:
        raise ValueError(f"--kind {args.kind} needs --model")
    tensors = ckpt.load(args.model) if args.model else None
    X = case_features(args.kind, cfg, cases, grids, tensors, args.seed)
    ckpt.save(os.path.join(args.out, "emb.mzck"),
              {f"emb/{c.case_id}": x for c, x in zip(cases, X)})


def load_embeddings(path):
    return {k[4:]: v for k, v in ckpt.load(path).items() if k.startswith("emb/")}


def run_probe(X_by_case, cases, tasks, cfg, protocol, seed):
    reports = []
    for t in tasks:
        if t.kind != "classification":
            continue
        labeled = [c for c in cases if t.id in c.labels and c.case_id in X_by_case]
        if len(labeled) < cfg["probe.folds"]:
            log.warning("task %s: %d labeled cases, skipped", t.id, len(labeled))
            continue
        X = np.stack([X_by_case[c.case_id] for c in labeled]).astype(np.float64)
        y = np.array([c.labels[t.id] for c in labeled])
        plan = make_folds(y, [c.case_id for c in labeled], cfg["probe.folds"],
                          rngmod.stream(seed, "folds", t.id), cfg["probe.val_fraction"])
        for w in plan.warnings:
            log.warning("task %s: %s", t.id, w)
        if protocol == "mlp":
            rep = mlp_probe(X, y, plan, C.probe_config(cfg), seed, t.id, t.n_classes)
        else:
            rep = linear_probe(X, y, plan, t.id, t.n_classes,
                               max_iter=cfg["probe.linear_max_iter"])
        reports.append(rep)
    return reports


def cmd_probe(args, cfg):
    tasks_path = args.tasks or os.path.join(os.path.dirname(args.labels), "tasks.txt")
    tasks = parse_task_manifest(_read(tasks_path))
    cases = parse_case_manifest(_read(args.labels), tasks)
    reports = run_probe(load_embeddings(args.embeddings), cases, tasks, cfg, args.protocol,
                        args.seed)
    write_text(os.path.join(args.out, "report.txt"), format_table(reports))
    lines = [line for r in reports for line in r.lines()]
    write_text(os.path.join(args.out, "report.csv"), "\n".join(lines) + "\n")
    sys.stdout.write(format_table(reports))


def cmd_diagnose(args, cfg):
    emb = load_embeddings(args.embeddings)
    X = np.stack([emb[k] for k in sorted(emb)]).astype(np.float64)
    ranks = pca_compactness(X, C.floats(cfg["diag.thresholds"]))
    write_text(os.path.join(args.out, "compactness.csv"),
               "threshold,rank\n" + "".join(f"{t!r},{r}\n" for t, r in ranks.items()))
    stab = neighborhood_stability(X, C.ints(cfg["diag.ks"]), cfg["diag.rho"],
                                  cfg["diag.repeats"], rngmod.stream(args.seed, "stability"))
    write_text(os.path.join(args.out, "stability.csv"),
               "k,mean,std\n" + "".join(f"{k},{m!r},{s!r}\n" for k, (m, s) in stab.items()))
    if args.attrib:
        if not (args.data and args.model):
            raise ValueError("--attrib needs --data and --model")
        enc = _slide_encoder(cfg, ckpt.load(args.model))
        _, cases, grids = _load_corpus(args.data)
        for ref in sorted(grids)[: args.attrib]:
            name = os.path.splitext(os.path.basename(ref))[0]
            amap = gradxinput_map(grids[ref], enc, dtype=dtype_for(cfg["model.precision"]))
            write_pgm(os.path.join(args.out, f"attrib_{name}.pgm"),
                      rasterize(amap, cfg["diag.downsample"]))
            write_text(os.path.join(args.out, f"attrib_{name}.csv"), attribution_csv(amap))


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "align": cmd_align, "embed": cmd_embed,
    "probe": cmd_probe, "diagnose": cmd_diagnose,
}


def run_command(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = C.load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
