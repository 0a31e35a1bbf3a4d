"""Gradient x input attribution maps and embedding-geometry diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import rankdata

from . import rng as rngmod
from .encoder import SlideEncoder, tokens_from_view
from .io import atomic_write
from .views import full_view

THRESHOLDS = (0.80, 0.90, 0.95)
# relative slack for cumulative explained variance; eigenvalues carry rounding error
_VAR_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AttributionMap:
    """Per valid patch: raw score, rank-normalized score, grid cell and level-0 box."""

    scores: np.ndarray
    normalized: np.ndarray
    cells: np.ndarray
    boxes: np.ndarray


def rank_normalize(scores) -> np.ndarray:
    """``rank / N`` with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("need at least one score")
    return rankdata(scores, method="average") / scores.size


def gradxinput_scores(x: torch.Tensor, embed) -> torch.Tensor:
    """``||x_i * d(phi)/d(x_i)||_1`` per row of ``x`` with ``phi = ||embed(x)||^2 / 2``."""
    x = x.detach().clone().requires_grad_(True)
    z = embed(x)
    phi = 0.5 * (z * z).sum()
    (g,) = torch.autograd.grad(phi, x)
    return (x.detach() * g).abs().sum(-1)


def gradxinput_map(grid, encoder: SlideEncoder, patch_size=None, dtype=torch.float64):
    """Attribute the slide CLS embedding of ``grid`` to its valid patches."""
    encoder.eval()
    view = full_view(grid)
    tokens = tokens_from_view(view, None, dtype)

    def embed(feats):
        tokens.features = feats[None]
        return encoder(tokens)[0][0]

    scores = gradxinput_scores(tokens.features[0], embed).numpy()
    flat = np.flatnonzero(view.validity.ravel())
    cells = np.stack(np.unravel_index(flat, view.validity.shape), 1)
    xy = view.coords.reshape(-1, 2)[flat].astype(np.float64)
    size = float(patch_size if patch_size is not None else grid.spacing)
    boxes = np.concatenate([xy, xy + size], 1)
    return AttributionMap(scores, rank_normalize(scores), cells, boxes)


def rasterize(amap: AttributionMap, downsample: float) -> np.ndarray:
    """Average normalized scores per output pixel over the patch boxes covering it.

    Pixels outside every box are 0.  Returns a float image in [0, 1].
    """
    x0, y0 = amap.boxes[:, 0].min(), amap.boxes[:, 1].min()
    W = int(math.ceil((amap.boxes[:, 2].max() - x0) / downsample))
    H = int(math.ceil((amap.boxes[:, 3].max() - y0) / downsample))
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for (bx0, by0, bx1, by1), v in zip(amap.boxes, amap.normalized):
        c0, r0 = int((bx0 - x0) // downsample), int((by0 - y0) // downsample)
        c1 = max(c0 + 1, int(math.ceil((bx1 - x0) / downsample)))
        r1 = max(r0 + 1, int(math.ceil((by1 - y0) / downsample)))
        total[r0:r1, c0:c1] += v
        count[r0:r1, c0:c1] += 1
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def write_pgm(path, image) -> None:
    """Binary 8-bit PGM of an image in [0, 1]."""
    img = np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with atomic_write(path) as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)


def attribution_csv(amap: AttributionMap) -> str:
    lines = ["row,col,x0,y0,x1,y1,score,normalized"]
    for (r, c), box, s, n in zip(amap.cells, amap.boxes, amap.scores, amap.normalized):
        lines.append(",".join([str(int(r)), str(int(c))] + [repr(float(v)) for v in box]
                              + [repr(float(s)), repr(float(n))]))
    return "\n".join(lines) + "\n"


# -- geometry -------------------------------------------------------------

@dataclass
class GeometryReport:
    compactness: dict
    stability: dict


def explained_variance(X) -> np.ndarray:
    """Cumulative explained-variance ratio ``V(r)`` for ``r = 1..D``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 embeddings")
    Xc = X - X.mean(0)
    C = Xc.T @ Xc / (X.shape[0] - 1)
    lam = np.clip(np.linalg.eigvalsh(C)[::-1], 0.0, None)
    total = lam.sum()
    if total <= 0:
        raise ValueError("embeddings have zero total variance")
    return np.cumsum(lam) / total


def pca_compactness(X, thresholds=THRESHOLDS) -> dict:
    """Smallest number of principal components reaching each variance threshold."""
    V = explained_variance(X)
    return {float(t): int(np.argmax(V >= t - _VAR_TOL)) + 1 for t in thresholds}


def knn_cosine(Xn, k: int, dist=None) -> np.ndarray:
    """Indices of the ``k`` nearest rows by cosine distance, self excluded, ties to lower index."""
    if dist is None:
        dist = 1.0 - Xn @ Xn.T
    dist = dist.copy()
    np.fill_diagonal(dist, np.inf)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def l2_rows(X, eps=1e-12):
    X = np.asarray(X, dtype=np.float64)
    return X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), eps)


def neighborhood_stability(X, ks, rho: float = 0.8, repeats: int = 20, rng=None) -> dict:
    """``{k: (mean, std)}`` of subsample-vs-full kNN overlap across bootstrap repeats."""
    Xn = l2_rows(X)
    N = Xn.shape[0]
    m = int(math.floor(rho * N + 0.5))
    ks = sorted(int(k) for k in ks)
    if m <= ks[-1] + 1:
        raise ValueError(f"subset of {m} rows too small for k = {ks[-1]}")
    if repeats < 1:
        raise ValueError("need at least one repeat")
    rng = rng if rng is not None else rngmod.stream(0, "stability")
    dist = 1.0 - Xn @ Xn.T
    kmax = ks[-1]
    full = knn_cosine(Xn, kmax, dist)
    per_rep = {k: [] for k in ks}
    for b in range(repeats):
        r = rngmod.child(rng, "repeat", b)
        subset = np.sort(r.choice(N, m, replace=False))
        sub = subset[knn_cosine(None, kmax, dist[np.ix_(subset, subset)])]
        for k in ks:
            overlap = [len(np.intersect1d(full[i, :k], sub[j, :k])) / k
                       for j, i in enumerate(subset)]
            per_rep[k].append(float(np.mean(overlap)))
    return {k: (float(np.mean(v)), float(np.std(v))) for k, v in per_rep.items()}


def geometry_report(X, thresholds=THRESHOLDS, ks=(5, 10, 20, 30), rho=0.8, repeats=20,
                    rng=None) -> GeometryReport:
    return GeometryReport(pca_compactness(X, thresholds),
                          neighborhood_stability(X, ks, rho, repeats, rng))
