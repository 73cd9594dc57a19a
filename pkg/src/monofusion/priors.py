"""Geometry priors from SLAM byproducts: sparse depth + reprojection error.

A sparse depth map is a dense float32 (H, W) array with -1.0 at pixels that
carry no depth; the matching error map uses the same sentinel. The sentinel
matches the downstream branch test ``depth >= 0``: negative encodes missing.
Confidence is ``exp(-lambda * error)``, so zero error means full confidence
and confidence decays monotonically with reprojection error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MISSING = -1.0
MAX_PRIOR_DEPTH = 3.0  # meters; deeper SLAM points are too noisy to keep


@dataclass
class GeometryPrior:
    """2-channel per-pixel prior: sparse depth + confidence.

    ``confidence`` is in (0, 1] exactly where ``depth`` is present and 0.0 at
    missing pixels. The raw reprojection error the confidence was derived
    from rides along (same support) because the local fusion stage widens
    its trust Gaussian with it; it is not an encoder input channel.
    """

    depth: np.ndarray  # (H, W) float32, MISSING where absent
    confidence: np.ndarray  # (H, W) float32, 0 where absent
    error: np.ndarray | None = None  # (H, W) float32, MISSING where absent

    def __post_init__(self):
        if self.depth.shape != self.confidence.shape:
            raise ValueError("depth and confidence shapes differ")
        if self.error is None:
            self.error = np.where(self.depth >= 0.0, np.float32(0.0), np.float32(MISSING))

    @property
    def support(self) -> np.ndarray:
        return self.depth >= 0.0

    @classmethod
    def empty(cls, height: int, width: int) -> "GeometryPrior":
        return cls(
            np.full((height, width), MISSING, dtype=np.float32),
            np.zeros((height, width), dtype=np.float32),
        )


def confidence_from_error(error_map: np.ndarray, confidence_lambda: float) -> np.ndarray:
    """Confidence ``exp(-lambda * E)`` where error is present, 0 elsewhere."""
    if confidence_lambda <= 0.0:
        raise ValueError(f"confidence_lambda must be positive, got {confidence_lambda}")
    error_map = np.asarray(error_map)
    present = error_map >= 0.0
    conf = np.zeros(error_map.shape, dtype=np.float64)
    conf[present] = np.exp(-confidence_lambda * error_map[present].astype(np.float64))
    return conf


def make_prior(
    sparse_depth: np.ndarray,
    error_map: np.ndarray,
    confidence_lambda: float = 1.0,
) -> GeometryPrior:
    """Assemble the 2-channel prior, dropping depths beyond 3.0 m."""
    sparse_depth = np.asarray(sparse_depth, dtype=np.float32)
    error_map = np.asarray(error_map, dtype=np.float32)
    if sparse_depth.shape != error_map.shape:
        raise ValueError("sparse depth and error map shapes differ")
    depth_present = sparse_depth >= 0.0
    err_present = error_map >= 0.0
    if not np.array_equal(depth_present, err_present):
        raise ValueError("sparse depth and error map must share the same support set")

    keep = depth_present & (sparse_depth > 0.0) & (sparse_depth <= MAX_PRIOR_DEPTH)
    depth = np.where(keep, sparse_depth, np.float32(MISSING))
    err = np.where(keep, error_map, np.float32(MISSING))
    conf = confidence_from_error(err, confidence_lambda)
    return GeometryPrior(depth, conf.astype(np.float32), err)


def simulate_slam_priors(
    gt_depth: np.ndarray,
    n_points: int,
    depth_noise_sigma: float,
    error_scale: float,
    seed: int,
):
    """Fake the SLAM frontend: sample sparse points off a ground-truth depth map.

    ``n_points`` pixels are drawn without replacement from the valid-depth
    pixels; sampled depths get Gaussian noise (clamped positive) and the
    reported reprojection errors are rank-correlated with the injected depth
    error magnitudes, so confidence is actually informative downstream.

    Returns ``(sparse_depth, error_map)`` with the -1 missing sentinel.
    """
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    valid = np.flatnonzero((gt_depth > 0.0) & np.isfinite(gt_depth))
    if n_points > valid.size:
        raise ValueError(f"asked for {n_points} points but only {valid.size} valid pixels")
    rng = np.random.default_rng(seed)

    sd = np.full(gt_depth.shape, MISSING, dtype=np.float32)
    err = np.full(gt_depth.shape, MISSING, dtype=np.float32)
    if n_points == 0:
        return sd, err

    chosen = rng.choice(valid, size=n_points, replace=False)
    noise = rng.normal(0.0, depth_noise_sigma, size=n_points) if depth_noise_sigma > 0 else np.zeros(n_points)
    depths = np.maximum(gt_depth.ravel()[chosen] + noise, 1e-4)

    raw_err = np.abs(rng.normal(0.0, error_scale, size=n_points)) if error_scale > 0 else np.zeros(n_points)
    # rank-match: largest reported error goes to the largest injected depth error
    order_by_noise = np.argsort(np.abs(noise), kind="stable")
    errors = np.empty(n_points)
    errors[order_by_noise] = np.sort(raw_err, kind="stable")

    sd.ravel()[chosen] = depths.astype(np.float32)
    err.ravel()[chosen] = errors.astype(np.float32)
    return sd, err


def save_sparse_prior(path, sparse_depth: np.ndarray, error_map: np.ndarray) -> None:
    """Text format shared with the CLI: header ``# width height``, then one
    ``u v depth error`` line per present pixel."""
    h, w = sparse_depth.shape
    vs, us = np.nonzero(sparse_depth >= 0.0)
    with open(path, "w") as f:
        f.write(f"# {w} {h}\n")
        for v, u in zip(vs.tolist(), us.tolist()):
            f.write(f"{u} {v} {sparse_depth[v, u]:.9g} {error_map[v, u]:.9g}\n")


def load_sparse_prior(path):
    """Inverse of :func:`save_sparse_prior`; returns ``(sparse_depth, error_map)``."""
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != "#":
            raise ValueError("sparse prior file must start with '# width height'")
        w, h = int(header[1]), int(header[2])
        sd = np.full((h, w), MISSING, dtype=np.float32)
        err = np.full((h, w), MISSING, dtype=np.float32)
        for ln, line in enumerate(f, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"line {ln}: expected 'u v depth error'")
            u, v = int(round(float(parts[0]))), int(round(float(parts[1])))
            if not (0 <= u < w and 0 <= v < h):
                raise ValueError(f"line {ln}: pixel ({u}, {v}) outside {w}x{h}")
            sd[v, u] = float(parts[2])
            err[v, u] = float(parts[3])
    return sd, err
