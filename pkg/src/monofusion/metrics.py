"""Evaluation metrics (3D geometry + 2D depth) and the training losses as
evaluable, gradient-checked quantities.

3D metrics compare point clouds sampled from meshes at a fixed density
(1 point per cm^2 by default). The production nearest-neighbor path uses a
KD-tree; tests hold an O(n^2) brute-force oracle against it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

TAU_DEFAULT = 0.05  # meters
SAMPLE_DENSITY_DEFAULT = 10000.0  # points per m^2 == 1 per cm^2
DELTA_THRESHOLD = 1.25


@dataclass
class MetricsReport3D:
    acc_m: float  # mean pred -> gt nearest distance
    comp_m: float  # mean gt -> pred nearest distance
    prec: float
    recall: float
    fscore: float
    tau: float


@dataclass
class MetricsReport2D:
    abs_rel: float
    abs_diff_m: float
    sq_rel_m: float
    rmse_m: float
    delta_125: float
    coverage: float  # fraction of valid-gt pixels with a prediction


def metrics_3d(pred_points: np.ndarray, gt_points: np.ndarray, tau: float = TAU_DEFAULT) -> MetricsReport3D:
    """Accuracy/completeness/precision/recall/F-score between point sets."""
    pred_points = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    gt_points = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(pred_points) == 0 or len(gt_points) == 0:
        raise ValueError("both point sets must be non-empty")
    d_pred, _ = cKDTree(gt_points).query(pred_points, k=1)
    d_gt, _ = cKDTree(pred_points).query(gt_points, k=1)
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    prec = float((d_pred < tau).mean())
    recall = float((d_gt < tau).mean())
    f = 2.0 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MetricsReport3D(acc, comp, prec, recall, f, tau)


def metrics_2d(
    pred_depth: np.ndarray,
    gt_depth: np.ndarray,
    valid_mask: np.ndarray | None = None,
) -> MetricsReport2D:
    """Depth error metrics over valid ground-truth pixels.

    Pixels where the prediction is missing (<= 0) are excluded from the
    error means, counted as failures for delta<1.25, and reported in
    ``coverage``.
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    valid = gt_depth > 0.0
    if valid_mask is not None:
        valid &= valid_mask.astype(bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid ground-truth pixels")
    covered = valid & (pred_depth > 0.0)
    n_cov = int(covered.sum())
    coverage = n_cov / n_valid
    if n_cov == 0:
        return MetricsReport2D(np.nan, np.nan, np.nan, np.nan, 0.0, 0.0)
    d = pred_depth[covered]
    g = gt_depth[covered]
    diff = np.abs(d - g)
    ratio_ok = np.maximum(d / g, g / d) < DELTA_THRESHOLD
    return MetricsReport2D(
        abs_rel=float((diff / g).mean()),
        abs_diff_m=float(diff.mean()),
        sq_rel_m=float((diff * diff / g).mean()),
        rmse_m=float(np.sqrt(((d - g) ** 2).mean())),
        delta_125=float(ratio_ok.sum() / n_valid),
        coverage=coverage,
    )


def sample_mesh_points(mesh, density: float = SAMPLE_DENSITY_DEFAULT, seed: int = 0) -> np.ndarray:
    """Uniform surface samples at a fixed density (points per m^2)."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    corners = mesh.triangle_corners()
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    n = max(int(round(total * density)), 1)
    rng = np.random.default_rng(seed)
    choice = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a = corners[choice, 0]
    b = corners[choice, 1]
    c = corners[choice, 2]
    return (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c


# ---------------------------------------------------------------------------
# losses


def loss_occupancy(pred: np.ndarray, gt: np.ndarray):
    """Mean binary cross-entropy and its gradient w.r.t. the predictions.

    Predictions must lie strictly inside (0, 1).
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if np.any((pred <= 0.0) | (pred >= 1.0)):
        raise ValueError("occupancy predictions must be strictly inside (0, 1)")
    n = len(pred)
    loss = float(-(gt * np.log(pred) + (1.0 - gt) * np.log(1.0 - pred)).mean())
    grad = (pred - gt) / (pred * (1.0 - pred)) / n
    return loss, grad


def log_transform(t: np.ndarray) -> np.ndarray:
    """Odd, bounded-slope transform: sign(t) * ln(1 + |t|)."""
    t = np.asarray(t, dtype=np.float64)
    return np.sign(t) * np.log1p(np.abs(t))


def _log_transform_slope(t: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.abs(np.asarray(t, dtype=np.float64)))


def loss_tsdf(pred: np.ndarray, gt: np.ndarray):
    """Mean l1 between log-transformed TSDF values, plus its (sub)gradient.

    The subgradient is 0 at exact ties.
    """
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    n = len(pred)
    diff = log_transform(pred) - log_transform(gt)
    loss = float(np.abs(diff).mean())
    grad = np.sign(diff) * _log_transform_slope(pred) / n
    return loss, grad


def grad_check(loss_fn, point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(x) -> (loss, grad)``; evaluated coordinate-wise in f64.
    """
    point = np.asarray(point, dtype=np.float64)
    _, analytic = loss_fn(point)
    numeric = np.zeros_like(point)
    for i in range(point.size):
        step = np.zeros_like(point)
        step.flat[i] = h
        lo, _ = loss_fn(point - step)
        hi, _ = loss_fn(point + step)
        numeric.flat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float((np.abs(analytic - numeric) / denom).max())


# ---------------------------------------------------------------------------
# report plumbing


def report_to_dict(r3: MetricsReport3D | None, r2: MetricsReport2D | None) -> dict:
    """Fixed-key JSON payload for evaluation reports."""
    out: dict = {}
    if r3 is not None:
        d = asdict(r3)
        d.pop("tau")
        out.update(d)
        out["tau_m"] = r3.tau
    if r2 is not None:
        out.update(asdict(r2))
    return out


def save_report(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
