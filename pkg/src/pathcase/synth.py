"""Seeded synthetic corpus: patch-feature grids, cases, planted tasks.

Every slide belongs to a site (a shared feature offset) and mixes a few
tissue types.  Labels live in a contiguous lesion region covering a small
fraction of the tissue: lesion patches carry a class-dependent shift per
classification task and a risk-proportional shift per survival task.  The
lesion fraction and tissue mix vary per slide, so mean pooling recovers the
labels only through a diluted, nuisance-laden signal.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .align import CaseRecord, TaskSpec, format_case_manifest, format_task_manifest
from .grid import FeatureGrid, save_grid
from .io import write_text


@dataclass(frozen=True)
class SynthSpec:
    n_slides: int = 500
    grid_min: int = 10
    grid_max: int = 16
    d_patch: int = 16
    spacing: float = 224.0
    n_sites: int = 4
    n_tissue: int = 6
    site_scale: float = 1.5
    tissue_scale: float = 2.0
    noise: float = 0.5
    lesion_min: float = 0.08
    lesion_max: float = 0.25
    lesion_scale: float = 2.0
    class_counts: tuple = (2, 3, 3)
    class_shift: tuple = (2.5, 2.0, 2.0)
    endpoints: tuple = ("OS", "PFI")
    risk_shift: float = 1.5
    risk_beta: float = 1.0
    base_rate: float = 0.1
    censor_max: float = 30.0
    second_slide_prob: float = 1 / 3
    label_prob: float = 0.9

    def __post_init__(self):
        if not 2 <= self.grid_min <= self.grid_max:
            raise ValueError("need 2 <= grid_min <= grid_max")
        if len(self.class_counts) != len(self.class_shift):
            raise ValueError("class_counts and class_shift must align")
        if not 0 < self.lesion_min <= self.lesion_max < 1:
            raise ValueError("need 0 < lesion_min <= lesion_max < 1")
        n_planted = 1 + sum(self.class_counts) + len(self.endpoints)
        if n_planted > self.d_patch:
            raise ValueError(f"{n_planted} planted directions need d_patch >= {n_planted}")


@dataclass
class SynthCorpus:
    spec: SynthSpec
    grids: dict
    tasks: list
    cases: list
    latent: dict = field(default_factory=dict)

    def case_grids(self, case):
        return [self.grids[s] for s in case.slides]



def tissue_blob(h, w, rng) -> np.ndarray:
    """Union of 1-3 random ellipses, never empty."""
    rr, cc = np.mgrid[0:h, 0:w]
    valid = np.zeros((h, w), bool)
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.25, 0.75) * h, rng.uniform(0.25, 0.75) * w
        ry, rx = rng.uniform(0.25, 0.55) * h, rng.uniform(0.25, 0.55) * w
        valid |= ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
    if not valid.any():
        valid[h // 2, w // 2] = True
    return valid


def lesion_region(valid, fraction, rng) -> np.ndarray:
    """The ``ceil(fraction * V)`` valid cells nearest a random valid seed cell."""
    cells = np.argwhere(valid)
    seed = cells[rng.integers(len(cells))]
    d2 = ((cells - seed) ** 2).sum(1)
    n = max(1, math.ceil(fraction * len(cells)))
    pick = cells[np.argsort(d2, kind="stable")[:n]]
    out = np.zeros_like(valid)
    out[pick[:, 0], pick[:, 1]] = True
    return out


@dataclass(frozen=True)
class _Prototypes:
    sites: np.ndarray
    tissue: np.ndarray
    lesion: np.ndarray
    shifts: list
    risk_dirs: np.ndarray


def _prototypes(spec: SynthSpec, rng) -> _Prototypes:
    d = spec.d_patch
    n_planted = 1 + sum(spec.class_counts) + len(spec.endpoints)
    # orthonormal planted directions keep every class pair separable
    frame, _ = np.linalg.qr(rng.normal(size=(d, n_planted)))
    dirs = iter(frame.T)
    lesion = next(dirs) * spec.lesion_scale
    shifts = [np.stack([next(dirs) * a for _ in range(k)])
              for k, a in zip(spec.class_counts, spec.class_shift)]
    return _Prototypes(
        sites=rng.normal(size=(spec.n_sites, d)) * spec.site_scale / math.sqrt(d) * 2,
        tissue=rng.normal(size=(spec.n_tissue, d)) * spec.tissue_scale / math.sqrt(d) * 2,
        lesion=lesion,
        shifts=shifts,
        risk_dirs=np.stack([next(dirs) for _ in spec.endpoints]),
    )


def _slide(spec, protos, site, classes, risks, rng):
    h = int(rng.integers(spec.grid_min, spec.grid_max + 1))
    w = int(rng.integers(spec.grid_min, spec.grid_max + 1))
    valid = tissue_blob(h, w, rng)
    lesion = lesion_region(valid, rng.uniform(spec.lesion_min, spec.lesion_max), rng)
    mix = rng.dirichlet(np.full(spec.n_tissue, 0.5))
    types = rng.choice(spec.n_tissue, size=(h, w), p=mix)
    feats = protos.sites[site] + protos.tissue[types]
    signal = protos.lesion + sum(s[y] for s, y in zip(protos.shifts, classes))
    signal = signal + spec.risk_shift * (np.asarray(risks) @ protos.risk_dirs)
    feats[lesion] = protos.sites[site] + signal
    feats = feats + spec.noise * rng.normal(size=feats.shape)
    feats[~valid] = 0.0
    return FeatureGrid(feats.astype(np.float32), valid, spec.spacing, (0.0, 0.0), "20x")


def synth_dataset(spec: SynthSpec, seed: int) -> SynthCorpus:
    """Deterministic corpus for ``seed``; slides are grouped into 1- or 2-slide cases."""
    protos = _prototypes(spec, rngmod.stream(seed, "synth", "prototypes"))
    tasks = [TaskSpec(f"cls{i}", "classification", tuple(f"c{k}" for k in range(K)))
             for i, K in enumerate(spec.class_counts)]
    tasks += [TaskSpec(f"surv_{e.lower()}", "survival", endpoint=e) for e in spec.endpoints]

    grids, cases, latent = {}, [], {}
    n, ci = 0, 0
    while n < spec.n_slides:
        r = rngmod.stream(seed, "synth", "case", ci)
        cid = f"case{ci:04d}"
        n_slides = 2 if (r.random() < spec.second_slide_prob and n + 2 <= spec.n_slides) else 1
        site = int(r.integers(spec.n_sites))
        classes = [int(r.integers(K)) for K in spec.class_counts]
        risks = r.normal(size=len(spec.endpoints))
        slides = []
        for j in range(n_slides):
            sid = f"{cid}_s{j}"
            grids[f"grids/{sid}.mzgr"] = _slide(spec, protos, site, classes, risks,
                                                rngmod.child(r, "slide", j))
            slides.append(f"grids/{sid}.mzgr")
        labels = {}
        for t, y in zip(tasks, classes):
            if r.random() < spec.label_prob:
                labels[t.id] = y
        for t, risk in zip(tasks[len(spec.class_counts):], risks):
            T = r.exponential(1.0 / (spec.base_rate * math.exp(spec.risk_beta * risk)))
            C = r.uniform(0.0, spec.censor_max)
            if r.random() < spec.label_prob:
                labels[t.id] = (float(min(T, C)), int(T <= C))
        cases.append(CaseRecord(cid, tuple(slides), labels))
        latent[cid] = {"site": site, "classes": classes, "risks": risks.tolist()}
        n += n_slides
        ci += 1
    return SynthCorpus(spec, grids, tasks, cases, latent)


def write_corpus(corpus: SynthCorpus, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "grids"), exist_ok=True)
    for ref, g in corpus.grids.items():
        save_grid(g, os.path.join(out_dir, ref))
    write_text(os.path.join(out_dir, "tasks.txt"), format_task_manifest(corpus.tasks))
    write_text(os.path.join(out_dir, "cases.txt"), format_case_manifest(corpus.cases))
    n_cls = len(corpus.spec.class_counts)
    head = (["case", "site"] + [f"class{i}" for i in range(n_cls)]
            + [f"risk_{e.lower()}" for e in corpus.spec.endpoints])
    lines = [",".join(head)]
    for cid, z in corpus.latent.items():
        lines.append(",".join([cid, str(z["site"])] + [str(y) for y in z["classes"]]
                              + [repr(float(v)) for v in z["risks"]]))
    write_text(os.path.join(out_dir, "latent.csv"), "\n".join(lines) + "\n")


def mean_features(grids) -> np.ndarray:
    """Mean valid-patch feature over all slides of one case (patch-count weighted)."""
    feats = np.concatenate([g.valid_tokens()[0] for g in grids])
    return feats.astype(np.float64).mean(0)
