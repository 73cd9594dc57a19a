"""Compact 2D encoders for color images and geometry priors, plus the
per-voxel back-projection of their features into 3D.

Both encoders are small stacks of 3x3 conv blocks (conv -> per-channel
scale -> leaky ReLU, slope 0.01; no normalization layers). The color
encoder emits three pyramid levels with 80/40/24 channels at strides 4/2/1;
the prior encoder is 4 cascaded stride-1 blocks at 8 channels, pooled down
to the same three strides. Weights are seeded-deterministic, untrained.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geom import Intrinsics, PixelCoord, Pose, project_points
from .priors import GeometryPrior, MAX_PRIOR_DEPTH
from .volume import GridSpec, key_centers, keys_to_array
from .weights import WeightStore, uniform_init

COLOR_CHANNELS = (80, 40, 24)  # per level, coarse to fine
GEO_CHANNELS = 8
LEVEL_STRIDES = (4, 2, 1)
LEAKY_SLOPE = 0.01


@dataclass
class FeatureMap:
    """Dense (H, W, C) float32 features at one pyramid level."""

    data: np.ndarray
    level: int

    @property
    def stride(self) -> int:
        return LEVEL_STRIDES[self.level]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class ViewSample(NamedTuple):
    """One voxel's sample from one view. Invisible samples carry a zero
    feature vector."""

    feature: np.ndarray
    pixel: PixelCoord
    depth: float
    visible: bool


@dataclass
class ViewSampleBatch:
    """Struct-of-arrays form of per-voxel view samples over sorted keys."""

    keys: np.ndarray  # (M, 3) int64, sorted
    features: np.ndarray  # (M, C) float32
    pixels: np.ndarray  # (M, 2) float64, undefined where invisible
    depths: np.ndarray  # (M,) float64, undefined where invisible
    visible: np.ndarray  # (M,) bool

    def __len__(self) -> int:
        return len(self.keys)

    def sample(self, i: int) -> ViewSample:
        return ViewSample(
            self.features[i],
            PixelCoord(float(self.pixels[i, 0]), float(self.pixels[i, 1])),
            float(self.depths[i]),
            bool(self.visible[i]),
        )


def leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 'same' convolution via im2col, zero padding of 1.

    x: (H, W, Cin), w: (3, 3, Cin, Cout). Output spatial size is H/stride
    for even H (required by the stride plan).
    """
    kh, kw, cin, cout = w.shape
    h, wd = x.shape[:2]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    oh = (h - 1) // stride + 1
    ow = (wd - 1) // stride + 1
    s0, s1, s2 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(oh, ow, kh, kw, cin),
        strides=(s0 * stride, s1 * stride, s0, s1, s2),
        writeable=False,
    )
    out = patches.reshape(oh * ow, kh * kw * cin) @ w.reshape(kh * kw * cin, cout)
    return (out + bias).reshape(oh, ow, cout).astype(np.float32)


def _block(x: np.ndarray, store: WeightStore, name: str, stride: int) -> np.ndarray:
    y = conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride)
    return leaky_relu(y * store[f"{name}.g"])


def _init_block(store: WeightStore, rng, name: str, cin: int, cout: int) -> None:
    store[f"{name}.w"] = uniform_init(rng, (3, 3, cin, cout), fan_in=9 * cin)
    store[f"{name}.b"] = np.zeros(cout, dtype=np.float32)
    store[f"{name}.g"] = np.ones(cout, dtype=np.float32)


_COLOR_PLAN = (
    # (block name, cin, cout, stride)
    ("enc.color.l0.c0", 1, 40, 2),
    ("enc.color.l0.c1", 40, 80, 2),
    ("enc.color.l1.c0", 1, 40, 2),
    ("enc.color.l2.c0", 1, 24, 1),
)
_GEO_PLAN = tuple(
    (f"enc.geo.c{i}", 2 if i == 0 else GEO_CHANNELS, GEO_CHANNELS, 1) for i in range(4)
)


def init_encoder_weights(seed: int) -> WeightStore:
    """Seeded encoder parameters for both the color and prior encoders."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE1C0]))
    store = WeightStore()
    for name, cin, cout, _stride in _COLOR_PLAN + _GEO_PLAN:
        _init_block(store, rng, name, cin, cout)
    return store


def _check_divisible(h: int, w: int) -> None:
    coarsest = LEVEL_STRIDES[0]
    if h % coarsest or w % coarsest:
        raise ValueError(f"image dimensions {w}x{h} must be divisible by {coarsest}")


def encode_image(image: np.ndarray, store: WeightStore) -> list:
    """Three color feature maps (80/40/24 channels at strides 4/2/1)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    _check_divisible(*image.shape[:2])
    l0 = _block(_block(image, store, "enc.color.l0.c0", 2), store, "enc.color.l0.c1", 2)
    l1 = _block(image, store, "enc.color.l1.c0", 2)
    l2 = _block(image, store, "enc.color.l2.c0", 1)
    return [FeatureMap(l0, 0), FeatureMap(l1, 1), FeatureMap(l2, 2)]


def encode_prior(prior: GeometryPrior, store: WeightStore) -> list:
    """Three 8-channel prior feature maps at strides 4/2/1.

    Missing pixels enter the stack as (0, 0): depth is normalized by the
    3 m cap and zeroed where absent, confidence is already 0 there.
    """
    _check_divisible(*prior.depth.shape)
    present = prior.support
    depth_norm = np.where(present, prior.depth / MAX_PRIOR_DEPTH, 0.0).astype(np.float32)
    x = np.stack([depth_norm, prior.confidence.astype(np.float32)], axis=-1)
    for name, _cin, _cout, stride in _GEO_PLAN:
        x = _block(x, store, name, stride)
    return [FeatureMap(_avg_pool(x, 4), 0), FeatureMap(_avg_pool(x, 2), 1), FeatureMap(x, 2)]


def _avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3)).astype(np.float32)


def bilinear_sample(data: np.ndarray, uv: np.ndarray, stride: int) -> np.ndarray:
    """Sample an (H, W, C) map at full-resolution pixel coordinates.

    A feature cell (i, j) at stride s covers the s*s pixel block and its
    center sits at full-res coordinate s*(i + 0.5); borders replicate.
    Exact at cell centers and linear along axes.
    """
    h, w = data.shape[:2]
    x = uv[:, 0] / stride - 0.5
    y = uv[:, 1] / stride - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    top = data[y0c, x0c] * (1.0 - fx) + data[y0c, x1c] * fx
    bot = data[y1c, x0c] * (1.0 - fx) + data[y1c, x1c] * fx
    return (top * (1.0 - fy) + bot * fy).astype(np.float32)


def backproject_features(
    f_color: FeatureMap,
    f_geo: FeatureMap,
    k: Intrinsics,
    pose: Pose,
    keys,
    spec: GridSpec,
) -> ViewSampleBatch:
    """Lift 2D features onto voxel keys for one view.

    Each key's center is projected; visible keys bilinearly sample both maps
    at the projected pixel and concatenate channels (color then geometry).
    Invisible keys get a zero feature and visible=False.
    """
    if f_color.level != f_geo.level:
        raise ValueError(f"feature level mismatch: color={f_color.level} geo={f_geo.level}")
    level = f_color.level
    keys_arr = keys if isinstance(keys, np.ndarray) else keys_to_array(keys)
    centers = key_centers(spec, level, keys_arr)
    uv, depth, visible = project_points(k, pose, centers)

    c_total = f_color.channels + f_geo.channels
    features = np.zeros((len(keys_arr), c_total), dtype=np.float32)
    if visible.any():
        uv_vis = uv[visible]
        features[visible, : f_color.channels] = bilinear_sample(f_color.data, uv_vis, f_color.stride)
        features[visible, f_color.channels :] = bilinear_sample(f_geo.data, uv_vis, f_geo.stride)
    return ViewSampleBatch(keys_arr, features, uv, depth, visible)
