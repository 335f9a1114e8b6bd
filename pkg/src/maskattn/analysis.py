"""Segmentation metrics, descriptor retrieval, PCA projection, and exports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .imageio import write_pgm

RECALL_GRID = np.round(np.arange(0, 21) * 0.05, 2)


# -- region and boundary metrics --------------------------------------------------


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; IoU of two empties is 1."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes disagree: {pred.shape} vs {gt.shape}")
    p = np.asarray(pred) > 0.5
    g = np.asarray(gt) > 0.5
    union = (p | g).sum()
    if union == 0:
        return 1.0
    return float((p & g).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbor outside the mask (image border counts)."""
    m = mask.astype(bool)
    inner = np.ones_like(m)
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    return m & ~inner


def _chebyshev_dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.astype(bool).copy()
    if radius <= 0:
        return out
    h, w = mask.shape
    acc = np.zeros((h, w), dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            acc[yd, xd] |= out[ys, xs]
    return acc


def default_boundary_tolerance(shape) -> int:
    h, w = shape
    return int(math.ceil(0.008 * math.hypot(h, w)))


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: int | None = None) -> float:
    """Boundary F1 within a Chebyshev pixel tolerance (default 0.8% of diagonal)."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes disagree: {pred.shape} vs {gt.shape}")
    if tol is None:
        tol = default_boundary_tolerance(pred.shape)
    if tol < 0:
        raise ConfigError("tolerance must be >= 0")
    pb = _boundary(np.asarray(pred) > 0.5)
    gb = _boundary(np.asarray(gt) > 0.5)
    np_, ng = int(pb.sum()), int(gb.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    precision = float((pb & _chebyshev_dilate(gb, tol)).sum() / np_)
    recall = float((gb & _chebyshev_dilate(pb, tol)).sum() / ng)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class MetricsReport:
    """Per-object, per-frame scores (first frame excluded) and their means."""

    per_frame_j: np.ndarray  # (frames-1) x objects
    per_frame_f: np.ndarray
    mean_j: float
    mean_f: float

    @property
    def j_and_f(self) -> float:
        return 0.5 * (self.mean_j + self.mean_f)


def j_and_f(pred_clip, gt_clip, tol: int | None = None) -> MetricsReport:
    """Score frames 2..T of a clip (frame 1 is the given annotation).

    Both arguments are per-frame NxHxW binary mask stacks of equal length.
    """
    if len(pred_clip) != len(gt_clip):
        raise ShapeError(f"clip lengths disagree: {len(pred_clip)} vs {len(gt_clip)}")
    js, fs = [], []
    for pred, gt in zip(pred_clip[1:], gt_clip[1:]):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"frame mask shapes disagree: {pred.shape} vs {gt.shape}")
        js.append([jaccard(pred[k], gt[k]) for k in range(pred.shape[0])])
        fs.append([boundary_f(pred[k], gt[k], tol) for k in range(pred.shape[0])])
    per_j = np.asarray(js, dtype=np.float64).reshape(len(js), -1)
    per_f = np.asarray(fs, dtype=np.float64).reshape(len(fs), -1)
    return MetricsReport(per_j, per_f, float(per_j.mean()), float(per_f.mean()))


# -- descriptor retrieval -----------------------------------------------------------


def descriptor_distances(descs: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances; symmetric with a zero diagonal."""
    x = np.asarray(descs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"descriptors must be NxC, got {x.shape}")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d2 = np.maximum(d2, 0.0)
    np.fill_diagonal(d2, 0.0)
    d = np.sqrt(d2)
    return 0.5 * (d + d.T)


@dataclass
class PRCurve:
    recalls: np.ndarray  # fixed grid, ascending
    precisions: np.ndarray  # averaged interpolated precision per grid point
    n_queries: int
    n_singletons: int


def pr_curve(distances: np.ndarray, instance_labels) -> PRCurve:
    """Average per-query interpolated precision on a fixed recall grid.

    Each descriptor queries all others ranked by ascending distance;
    instances with a single descriptor are excluded (and counted).
    """
    d = np.asarray(distances, dtype=np.float64)
    labels = np.asarray(instance_labels)
    n = d.shape[0]
    if d.shape != (n, n) or labels.shape != (n,):
        raise ShapeError(f"distances {d.shape} and labels {labels.shape} disagree")
    curves = []
    singles = 0
    for i in range(n):
        same = labels == labels[i]
        positives = int(same.sum()) - 1
        if positives < 1:
            singles += 1
            continue
        order = np.argsort(np.delete(d[i], i), kind="stable")
        rel = np.delete(same, i)[order]
        hits = np.cumsum(rel)
        ranks = np.arange(1, n)
        rec = hits / positives
        prec = hits / ranks
        pos_rec = rec[rel]
        pos_prec = prec[rel]
        interp = np.empty_like(RECALL_GRID)
        for gi, r in enumerate(RECALL_GRID):
            ok = pos_rec >= r - 1e-12
            interp[gi] = pos_prec[ok].max() if ok.any() else 0.0
        curves.append(interp)
    if not curves:
        raise ContractError("every instance is a singleton; no retrieval queries possible")
    return PRCurve(
        recalls=RECALL_GRID.copy(),
        precisions=np.mean(curves, axis=0),
        n_queries=len(curves),
        n_singletons=singles,
    )


# -- PCA ----------------------------------------------------------------------------


def _power_iteration(mat: np.ndarray, tol: float, max_iter: int):
    c = mat.shape[0]
    norm = np.linalg.norm(mat)
    if norm < 1e-300:
        return 0.0, None
    starts = [mat[:, int(np.argmax(np.diag(mat)))]] + [np.eye(c)[i] for i in range(c)]
    for start in starts:
        nv = np.linalg.norm(start)
        if nv < 1e-300:
            continue
        v = start / nv
        lam = 0.0
        for _ in range(max_iter):
            w = mat @ v
            lam = float(v @ w)
            resid = np.linalg.norm(w - lam * v)
            if resid <= tol * max(abs(lam), 1e-30):
                return lam, v
            nw = np.linalg.norm(w)
            if nw < 1e-300:
                break  # start vector lies in the null space; try the next one
            v = w / nw
        else:
            raise NumericError(
                f"power iteration did not converge in {max_iter} steps (residual {resid:.3e})"
            )
    raise NumericError("power iteration failed from every start vector")


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return v if v[int(np.argmax(np.abs(v)))] >= 0 else -v


def pca_project(descs: np.ndarray, d: int = 2, tol: float = 1e-10, max_iter: int = 10000):
    """Top-d principal components via deflated power iteration.

    Returns (projections Nxd, components dxC, explained_variance d). The
    covariance uses ddof=1; component signs put the largest-magnitude entry
    positive.
    """
    x = np.asarray(descs, dtype=np.float64)
    n, c = x.shape
    if n < d:
        raise ConfigError(f"need at least d={d} rows, got {n}")
    xc = x - x.mean(axis=0)
    cov = (xc.T @ xc) / max(n - 1, 1)
    comps = []
    variances = []
    work = cov.copy()
    for j in range(d):
        lam, v = _power_iteration(work, tol, max_iter)
        if v is None:  # zero-variance remainder: deterministic orthonormal completion
            v = np.eye(c)[0]
            for prev in comps:
                v = v - (v @ prev) * prev
            k = 0
            while np.linalg.norm(v) < 1e-12 and k + 1 < c:
                k += 1
                v = np.eye(c)[k]
                for prev in comps:
                    v = v - (v @ prev) * prev
            v = v / np.linalg.norm(v)
            lam = 0.0
        comps.append(_fix_sign(v))
        variances.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
        work = 0.5 * (work + work.T)
    components = np.stack(comps)
    return xc @ components.T, components, np.asarray(variances)


# -- exports --------------------------------------------------------------------------


def export_heatmap(prob: np.ndarray, path) -> None:
    """Write an HxW probability map as binary PGM; byte value = round(255 p)."""
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"heatmap must be 2-D, got shape {arr.shape}")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ContractError(f"heatmap values out of [0,1]: min={arr.min()!r} max={arr.max()!r}")
    write_pgm(path, arr)


def _csv_field(value) -> str:
    if isinstance(value, (float, np.floating)):
        text = f"{float(value):.17g}"
    else:
        text = str(value)
    if any(ch in text for ch in ',"\n\r'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def export_csv(path, header, rows) -> None:
    """RFC-4180-style CSV with a header; floats keep 17 significant digits."""
    lines = [",".join(_csv_field(h) for h in header)]
    for row in rows:
        lines.append(",".join(_csv_field(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\r\n".join(lines) + "\r\n")


def export_descriptors(path, descs: np.ndarray, labels) -> None:
    descs = np.asarray(descs)
    header = ["label"] + [f"d{i}" for i in range(descs.shape[1])]
    rows = [[lab] + list(vec) for lab, vec in zip(labels, descs)]
    export_csv(path, header, rows)
