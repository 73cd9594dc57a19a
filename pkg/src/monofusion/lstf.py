"""Local fusion: N per-view voxel features -> one fragment feature.

Single-head attention over the views of a fragment (queries/keys/values
from the same N-token stack), modulated by explicit spatial weights derived
from the sparse depth prior: a view whose sparse depth at the voxel's pixel
agrees with the voxel's projected depth is trusted more. Weight form is the
unnormalized Gaussian exp(-gap^2 / (2 sigma^2)) with peak 1, sigma widened
by the pixel's reprojection error; pixels with no sparse depth contribute
weight 1 so an empty prior degrades to plain attention.

The N output tokens are reduced to one voxel feature by a mean over visible
views, then a feed-forward layer maps to the level's output width. Attention
math runs in float64 internally; inputs and outputs are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import SparseVolume
from .weights import WeightStore, uniform_init

SIGMA_BASE_DEFAULT = 0.04  # meters, one fine voxel
ERROR_REF_DEFAULT = 2.0  # pixels of reprojection error that double sigma
LEAKY_SLOPE = 0.01


@dataclass
class ViewStack:
    """Per-voxel attention input: N view features + visibility + explicit
    weights. Rows of invisible views must be zero."""

    features: np.ndarray  # (N, C) float32
    mask: np.ndarray  # (N,) bool
    wex: np.ndarray  # (N,) float, in [0, 1]

    def __post_init__(self):
        if len(self.features) != len(self.mask) or len(self.mask) != len(self.wex):
            raise ValueError("features, mask and wex must agree on N")
        if len(self.features) < 1:
            raise ValueError("a view stack needs N >= 1")


@dataclass
class AttnParams:
    """Single-head attention parameters plus the output feed-forward."""

    w_q: np.ndarray  # (C, C)
    w_k: np.ndarray
    w_v: np.ndarray
    ff_w1: np.ndarray  # (C, C)
    ff_b1: np.ndarray
    ff_w2: np.ndarray  # (C, C_out)
    ff_b2: np.ndarray

    @property
    def c_in(self) -> int:
        return self.w_q.shape[0]

    @property
    def c_out(self) -> int:
        return self.ff_w2.shape[1]

    @classmethod
    def init(cls, c_in: int, c_out: int, rng: np.random.Generator) -> "AttnParams":
        return cls(
            w_q=uniform_init(rng, (c_in, c_in), c_in),
            w_k=uniform_init(rng, (c_in, c_in), c_in),
            w_v=uniform_init(rng, (c_in, c_in), c_in),
            ff_w1=uniform_init(rng, (c_in, c_in), c_in),
            ff_b1=np.zeros(c_in, dtype=np.float32),
            ff_w2=uniform_init(rng, (c_in, c_out), c_in),
            ff_b2=np.zeros(c_out, dtype=np.float32),
        )

    def add_to_store(self, store: WeightStore, prefix: str) -> None:
        for name in ("w_q", "w_k", "w_v", "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
            store[f"{prefix}.{name}"] = getattr(self, name)

    @classmethod
    def from_store(cls, store: WeightStore, prefix: str) -> "AttnParams":
        return cls(**{n: store[f"{prefix}.{n}"] for n in (
            "w_q", "w_k", "w_v", "ff_w1", "ff_b1", "ff_w2", "ff_b2")})


def explicit_weight(
    sparse_depth: np.ndarray,
    error_map: np.ndarray,
    pixel,
    depth: float,
    sigma_base: float = SIGMA_BASE_DEFAULT,
    error_ref: float = ERROR_REF_DEFAULT,
) -> float:
    """Spatial weight of one view for one voxel.

    Nearest-pixel lookup of the sparse depth at the voxel's projected pixel;
    returns 1.0 when that pixel carries no depth (prior is silent there).
    """
    if depth <= 0.0:
        raise ValueError(f"projected depth must be positive, got {depth}")
    h, w = sparse_depth.shape
    u = getattr(pixel, "u", None)
    if u is None:
        u, v = pixel
    else:
        v = pixel.v
    ui = min(max(int(np.floor(u)), 0), w - 1)
    vi = min(max(int(np.floor(v)), 0), h - 1)
    sd = float(sparse_depth[vi, ui])
    if sd < 0.0:
        return 1.0
    err = max(float(error_map[vi, ui]), 0.0)
    sigma = sigma_base * (1.0 + err / error_ref)
    gap = sd - depth
    return float(np.exp(-(gap * gap) / (2.0 * sigma * sigma)))


def explicit_weights_batch(
    sparse_depth: np.ndarray,
    error_map: np.ndarray,
    uv: np.ndarray,
    depths: np.ndarray,
    visible: np.ndarray,
    sigma_base: float = SIGMA_BASE_DEFAULT,
    error_ref: float = ERROR_REF_DEFAULT,
) -> np.ndarray:
    """Vectorized :func:`explicit_weight` over one view's samples.

    Invisible samples get weight 0 (they are masked out of the attention
    anyway)."""
    h, w = sparse_depth.shape
    out = np.zeros(len(depths), dtype=np.float64)
    if not visible.any():
        return out
    ui = np.clip(np.floor(uv[visible, 0]).astype(np.int64), 0, w - 1)
    vi = np.clip(np.floor(uv[visible, 1]).astype(np.int64), 0, h - 1)
    sd = sparse_depth[vi, ui].astype(np.float64)
    err = np.maximum(error_map[vi, ui].astype(np.float64), 0.0)
    sigma = sigma_base * (1.0 + err / error_ref)
    gap = sd - depths[visible]
    weights = np.where(sd >= 0.0, np.exp(-(gap * gap) / (2.0 * sigma * sigma)), 1.0)
    out[visible] = weights
    return out


def _feed_forward(x: np.ndarray, params: AttnParams) -> np.ndarray:
    h = x @ params.ff_w1.astype(np.float64) + params.ff_b1
    h = np.where(h >= 0.0, h, LEAKY_SLOPE * h)
    return h @ params.ff_w2.astype(np.float64) + params.ff_b2


def attention_batch(
    features: np.ndarray,
    mask: np.ndarray,
    wex: np.ndarray,
    params: AttnParams,
    mode: str = "attention",
    return_internals: bool = False,
):
    """Fuse (M, N, C) view stacks into (M, C_out) voxel features.

    ``mode="attention"`` runs the full mechanism; ``mode="mean"`` is the
    averaging ablation (plain mean of visible features, then feed-forward).
    Every stack must have at least one visible view.
    """
    feats = np.asarray(features, dtype=np.float64)
    m, n, c = feats.shape
    if c != params.c_in:
        raise ValueError(f"feature width {c} != params width {params.c_in}")
    n_vis = mask.sum(axis=1)
    if np.any(n_vis == 0):
        raise ValueError("every stack must have at least one visible view")

    if mode == "mean":
        pre_ff = (feats * mask[:, :, None]).sum(axis=1) / n_vis[:, None]
        fused = _feed_forward(pre_ff, params).astype(np.float32)
        if return_internals:
            return fused, {"pre_ff": pre_ff, "softmax": None}
        return fused
    if mode != "attention":
        raise ValueError(f"unknown fusion mode {mode!r}")

    q = feats @ params.w_q.T.astype(np.float64)
    k = feats @ params.w_k.T.astype(np.float64)
    v = feats @ params.w_v.T.astype(np.float64)
    scores = np.einsum("mnc,mkc->mnk", q, k) / np.sqrt(c)
    scores = np.where(mask[:, None, :], scores, -np.inf)
    scores -= scores.max(axis=2, keepdims=True)
    ex = np.exp(scores)
    softmax = ex / ex.sum(axis=2, keepdims=True)
    v_scaled = v * np.asarray(wex, dtype=np.float64)[:, :, None]
    a_out = softmax @ v_scaled  # (M, N, C)
    pre_ff = (a_out * mask[:, :, None]).sum(axis=1) / n_vis[:, None]
    fused = _feed_forward(pre_ff, params).astype(np.float32)
    if return_internals:
        return fused, {"pre_ff": pre_ff, "softmax": softmax}
    return fused


def cross_modal_attention(
    stack: ViewStack,
    params: AttnParams,
    mode: str = "attention",
    return_internals: bool = False,
):
    """Single-voxel convenience wrapper around :func:`attention_batch`."""
    if not stack.mask.any():
        raise ValueError("all views invisible; the voxel has no observation")
    result = attention_batch(
        stack.features[None], stack.mask[None], stack.wex[None], params, mode, return_internals
    )
    if return_internals:
        fused, internals = result
        internals = {k: (None if v is None else v[0]) for k, v in internals.items()}
        return fused[0], internals
    return result[0]


def fuse_fragment(
    stacks: dict,
    params: AttnParams,
    level: int = 0,
    mode: str = "attention",
) -> SparseVolume:
    """Fuse per-voxel :class:`ViewStack`s into a fragment feature volume.

    Keys with zero visible views are dropped. ``stacks`` maps voxel key ->
    ViewStack at a single level.
    """
    if not stacks:
        raise ValueError("empty fragment")
    keys = sorted(stacks.keys())
    kept = [key for key in keys if stacks[key].mask.any()]
    vol = SparseVolume(level=level)
    if not kept:
        return vol
    feats = np.stack([stacks[key].features for key in kept])
    mask = np.stack([stacks[key].mask for key in kept])
    wex = np.stack([stacks[key].wex for key in kept])
    fused = attention_batch(feats, mask, wex, params, mode)
    for key, f in zip(kept, fused):
        vol.entries[key] = f
    return vol


def explicit_weights_for_fragment(
    keys,
    priors: list,
    cameras: list,
    spec,
    level: int,
    sigma_base: float = SIGMA_BASE_DEFAULT,
    error_ref: float = ERROR_REF_DEFAULT,
):
    """Explicit weights for every (voxel, view) pair of a fragment.

    Projects each key center into each of the N views and evaluates the
    Gaussian prior weight there; invisible pairs get 0. Returns
    ``(sorted_keys (M, 3), weights (M, N), visible (M, N))``.
    """
    from .geom import project_points
    from .volume import key_centers, keys_to_array

    if len(priors) != len(cameras):
        raise ValueError("need one prior per camera")
    keys_arr = keys if isinstance(keys, np.ndarray) else keys_to_array(keys)
    centers = key_centers(spec, level, keys_arr)
    n = len(cameras)
    weights = np.zeros((len(keys_arr), n), dtype=np.float64)
    vis = np.zeros((len(keys_arr), n), dtype=bool)
    for t, ((k, pose), prior) in enumerate(zip(cameras, priors)):
        uv, depth, visible = project_points(k, pose, centers)
        weights[:, t] = explicit_weights_batch(
            prior.depth, prior.error, uv, depth, visible, sigma_base, error_ref
        )
        vis[:, t] = visible
    return keys_arr, weights, vis
