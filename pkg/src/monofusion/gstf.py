"""Global fusion: a sparse-convolutional GRU over a persistent hidden
volume, occupancy/TSDF prediction heads, the coarse-to-fine loop, and the
classical TSDF-fusion oracle used to verify the pipeline end to end.

Sparse convolutions are submanifold: the output active set equals the input
active set and each output voxel gathers only active neighbors (absent
neighbors contribute zero). Neighbor lookups go through packed int64 key
codes + binary search, so a conv is 27 gather+GEMM passes. GEMMs run in
float32; gate nonlinearities and the recurrent convex combination run in
float64 so gates stay strictly inside (0, 1) and hidden entries strictly
inside (-1, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import project_points
from .volume import (
    GridSpec,
    SparseVolume,
    TsdfVoxel,
    allocate_fragment_keys,
    key_centers,
    keys_to_array,
    merge_local_into_global,
    pack_keys,
    upsample_occupied,
)
from .weights import WeightStore, uniform_init

LEAKY_SLOPE = 0.01
TRUNCATION_DEFAULT = 0.12  # meters

_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass
class GruParams:
    """Per-level recurrent unit: 2 surface-extraction convs + 3 gate convs.

    All kernels are 3x3x3. The gate convs consume the channel-concatenated
    [hidden; surface] stack (2C -> C).
    """

    surf0_w: np.ndarray
    surf0_b: np.ndarray
    surf1_w: np.ndarray
    surf1_b: np.ndarray
    conv_z_w: np.ndarray
    conv_z_b: np.ndarray
    conv_r_w: np.ndarray
    conv_r_b: np.ndarray
    conv_h_w: np.ndarray
    conv_h_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.surf0_w.shape[4]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "GruParams":
        def conv(cin, cout):
            return uniform_init(rng, (3, 3, 3, cin, cout), fan_in=27 * cin)

        c = channels
        return cls(
            surf0_w=conv(c, c), surf0_b=np.zeros(c, dtype=np.float32),
            surf1_w=conv(c, c), surf1_b=np.zeros(c, dtype=np.float32),
            conv_z_w=conv(2 * c, c), conv_z_b=np.zeros(c, dtype=np.float32),
            conv_r_w=conv(2 * c, c), conv_r_b=np.zeros(c, dtype=np.float32),
            conv_h_w=conv(2 * c, c), conv_h_b=np.zeros(c, dtype=np.float32),
        )

    _FIELDS = (
        "surf0_w", "surf0_b", "surf1_w", "surf1_b",
        "conv_z_w", "conv_z_b", "conv_r_w", "conv_r_b", "conv_h_w", "conv_h_b",
    )

    def add_to_store(self, store: WeightStore, prefix: str) -> None:
        for name in self._FIELDS:
            store[f"{prefix}.{name}"] = getattr(self, name)

    @classmethod
    def from_store(cls, store: WeightStore, prefix: str) -> "GruParams":
        return cls(**{n: store[f"{prefix}.{n}"] for n in cls._FIELDS})


@dataclass
class Heads:
    """Per-voxel prediction heads: 2-layer MLPs ending in sigmoid
    (occupancy) and tanh (TSDF)."""

    occ_w1: np.ndarray
    occ_b1: np.ndarray
    occ_w2: np.ndarray
    occ_b2: np.ndarray
    tsdf_w1: np.ndarray
    tsdf_b1: np.ndarray
    tsdf_w2: np.ndarray
    tsdf_b2: np.ndarray

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "Heads":
        hidden = max(channels // 2, 1)

        def pair(prefix):
            return {
                f"{prefix}_w1": uniform_init(rng, (channels, hidden), channels),
                f"{prefix}_b1": np.zeros(hidden, dtype=np.float32),
                f"{prefix}_w2": uniform_init(rng, (hidden, 1), hidden),
                f"{prefix}_b2": np.zeros(1, dtype=np.float32),
            }

        return cls(**pair("occ"), **pair("tsdf"))

    _FIELDS = ("occ_w1", "occ_b1", "occ_w2", "occ_b2", "tsdf_w1", "tsdf_b1", "tsdf_w2", "tsdf_b2")

    def add_to_store(self, store: WeightStore, prefix: str) -> None:
        for name in self._FIELDS:
            store[f"{prefix}.{name}"] = getattr(self, name)

    @classmethod
    def from_store(cls, store: WeightStore, prefix: str) -> "Heads":
        return cls(**{n: store[f"{prefix}.{n}"] for n in cls._FIELDS})


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def sparse_conv_arrays(
    codes: np.ndarray,
    keys: np.ndarray,
    feats: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Submanifold 3x3x3 convolution over sorted packed keys.

    ``codes`` must be ``pack_keys(keys)`` in ascending order. Kernel tap
    (a, b, c) weights the neighbor at offset (a-1, b-1, c-1).
    """
    m = len(keys)
    cout = kernel.shape[4]
    out = np.zeros((m, cout), dtype=np.float32)
    feats32 = feats.astype(np.float32, copy=False)
    for idx, off in enumerate(_OFFSETS):
        tap = kernel[idx // 9, (idx // 3) % 3, idx % 3]
        ncodes = pack_keys(keys + off)
        pos = np.searchsorted(codes, ncodes)
        pos_c = np.minimum(pos, m - 1)
        found = codes[pos_c] == ncodes
        if found.any():
            out[found] += feats32[pos_c[found]] @ tap
    if bias is not None:
        out += bias
    return out


def _vol_to_arrays(vol: SparseVolume):
    keys = keys_to_array(vol.keys())
    if len(keys) == 0:
        return keys, np.empty(0, dtype=np.int64), np.empty((0, 0), dtype=np.float32)
    feats = np.stack([np.asarray(vol.entries[tuple(k)]) for k in keys.tolist()])
    return keys, pack_keys(keys), feats.astype(np.float32, copy=False)


def _arrays_to_vol(level: int, keys: np.ndarray, feats: np.ndarray) -> SparseVolume:
    vol = SparseVolume(level)
    for k, f in zip(keys.tolist(), feats):
        vol.entries[tuple(k)] = f
    return vol


def sparse_conv3d(vol: SparseVolume, kernel: np.ndarray, bias: np.ndarray | None = None) -> SparseVolume:
    """Submanifold sparse convolution on a feature volume (active set is
    preserved exactly)."""
    kernel = np.asarray(kernel, dtype=np.float32)
    if kernel.ndim != 5 or kernel.shape[:3] != (3, 3, 3):
        raise ValueError(f"kernel must be (3, 3, 3, Cin, Cout), got {kernel.shape}")
    keys, codes, feats = _vol_to_arrays(vol)
    if len(keys) == 0:
        return SparseVolume(vol.level)
    if feats.shape[1] != kernel.shape[3]:
        raise ValueError(f"channel mismatch: features {feats.shape[1]}, kernel {kernel.shape[3]}")
    out = sparse_conv_arrays(codes, keys, feats, kernel, bias)
    return _arrays_to_vol(vol.level, keys, out)


def _surface_feature_arrays(codes, keys, feats, params: GruParams) -> np.ndarray:
    s = _leaky(sparse_conv_arrays(codes, keys, feats, params.surf0_w, params.surf0_b))
    return _leaky(sparse_conv_arrays(codes, keys, s, params.surf1_w, params.surf1_b))


def extract_surface_feature(frag: SparseVolume, params: GruParams) -> SparseVolume:
    """Two stacked conv blocks lifting fragment features to the surface
    geometry feature the recurrent unit consumes. Same active set."""
    keys, codes, feats = _vol_to_arrays(frag)
    if len(keys) == 0:
        return SparseVolume(frag.level)
    return _arrays_to_vol(frag.level, keys, _surface_feature_arrays(codes, keys, feats, params))


def _gru_update_arrays(codes, keys, h: np.ndarray, s: np.ndarray, params: GruParams) -> np.ndarray:
    hs = np.concatenate([h.astype(np.float32), s.astype(np.float32)], axis=1)
    z = _sigmoid(sparse_conv_arrays(codes, keys, hs, params.conv_z_w, params.conv_z_b).astype(np.float64))
    r = _sigmoid(sparse_conv_arrays(codes, keys, hs, params.conv_r_w, params.conv_r_b).astype(np.float64))
    rhs = np.concatenate([(r * h).astype(np.float32), s.astype(np.float32)], axis=1)
    h_cand = np.tanh(sparse_conv_arrays(codes, keys, rhs, params.conv_h_w, params.conv_h_b).astype(np.float64))
    return (1.0 - z) * h + z * h_cand


def gru_update(h_local: SparseVolume, s_frag: SparseVolume, params: GruParams) -> SparseVolume:
    """One recurrent step over the fragment's active set.

    z = sigmoid(Conv_z[H;S]), r = sigmoid(Conv_r[H;S]),
    H~ = tanh(Conv_h[r*H;S]), H' = (1-z)*H + z*H~.
    Keys absent from ``h_local`` start from the zero hidden vector.
    """
    keys, codes, s = _vol_to_arrays(s_frag)
    if len(keys) == 0:
        return SparseVolume(s_frag.level)
    c = s.shape[1]
    h = np.zeros((len(keys), c), dtype=np.float64)
    for i, k in enumerate(keys.tolist()):
        entry = h_local.entries.get(tuple(k))
        if entry is not None:
            h[i] = entry
    out = _gru_update_arrays(codes, keys, h, s, params)
    return _arrays_to_vol(s_frag.level, keys, out)


def _predict_arrays(h: np.ndarray, heads: Heads):
    h32 = h.astype(np.float32)
    occ_pre = _leaky(h32 @ heads.occ_w1 + heads.occ_b1) @ heads.occ_w2 + heads.occ_b2
    tsdf_pre = _leaky(h32 @ heads.tsdf_w1 + heads.tsdf_b1) @ heads.tsdf_w2 + heads.tsdf_b2
    occ = _sigmoid(occ_pre.astype(np.float64)[:, 0])
    tsdf = np.tanh(tsdf_pre.astype(np.float64)[:, 0])
    return occ, tsdf


def predict(h: SparseVolume, heads: Heads):
    """Per-voxel occupancy in (0,1) and TSDF in (-1,1) from hidden state."""
    keys, _codes, feats = _vol_to_arrays(h)
    occ_vol = SparseVolume(h.level)
    tsdf_vol = SparseVolume(h.level)
    if len(keys) == 0:
        return occ_vol, tsdf_vol
    occ, tsdf = _predict_arrays(feats, heads)
    for k, o, t in zip(keys.tolist(), occ.tolist(), tsdf.tolist()):
        occ_vol.entries[tuple(k)] = o
        tsdf_vol.entries[tuple(k)] = TsdfVoxel(t, 1.0)
    return occ_vol, tsdf_vol


@dataclass
class FragmentFusion:
    """Per-level results of fusing one fragment into the global state."""

    active_keys: list  # per level: (M, 3) int64 array of keys actually fused
    occ: list  # per level: SparseVolume of occupancy over active keys
    tsdf: list  # per level: SparseVolume[TsdfVoxel]


def fuse_fragment_level(
    frag: SparseVolume,
    prev_occ: SparseVolume | None,
    h_global: SparseVolume,
    occ_global: SparseVolume,
    tsdf_global: SparseVolume,
    params: GruParams,
    heads: Heads,
    theta: float,
):
    """Fuse one level of one fragment into the global state.

    Restricts the fragment's keys to children of theta-passing coarse keys
    (when ``prev_occ`` is given), runs surface extraction, the recurrent
    update, and the prediction heads, and writes hidden/occupancy/TSDF back
    at the fragment keys (replace policy: hidden carries the history,
    outputs are re-derived from it every fragment).

    Returns ``(active_keys (M, 3), occ_volume, tsdf_volume)``.
    """
    level = frag.level
    keys = set(frag.keys())
    if prev_occ is not None:
        keys &= upsample_occupied(prev_occ, theta)
    keys_arr = keys_to_array(keys)
    if len(keys_arr) == 0:
        return keys_arr, SparseVolume(level), SparseVolume(level)

    codes = pack_keys(keys_arr)
    feats = np.stack([np.asarray(frag.entries[tuple(k)]) for k in keys_arr.tolist()])
    s = _surface_feature_arrays(codes, keys_arr, feats.astype(np.float32), params)

    h = np.zeros((len(keys_arr), s.shape[1]), dtype=np.float64)
    for i, k in enumerate(keys_arr.tolist()):
        entry = h_global.entries.get(tuple(k))
        if entry is not None:
            h[i] = entry
    h_new = _gru_update_arrays(codes, keys_arr, h, s, params)
    occ, tsdf = _predict_arrays(h_new, heads)

    occ_vol = SparseVolume(level)
    tsdf_vol = SparseVolume(level)
    for i, k in enumerate(keys_arr.tolist()):
        kt = tuple(k)
        h_global.entries[kt] = h_new[i]
        occ_vol.entries[kt] = occ[i]
        tsdf_vol.entries[kt] = TsdfVoxel(float(tsdf[i]), 1.0)
    merge_local_into_global(occ_vol, occ_global, "replace")
    merge_local_into_global(tsdf_vol, tsdf_global, "replace")
    return keys_arr, occ_vol, tsdf_vol


def fuse_fragment_global(
    frag_features: dict,
    h_global: dict,
    occ_global: dict,
    tsdf_global: dict,
    params: dict,
    heads: dict,
    theta: float,
    levels: int = 3,
) -> FragmentFusion:
    """Coarse-to-fine recurrent fusion of one whole fragment.

    ``frag_features`` maps level -> SparseVolume of fused fragment features;
    the remaining dict arguments map level -> the corresponding per-level
    global volume / parameters. Levels above 0 are restricted to children of
    coarse keys whose predicted occupancy passed ``theta``.
    """
    result = FragmentFusion([], [], [])
    prev_occ: SparseVolume | None = None
    for level in range(levels):
        frag = frag_features.get(level) or SparseVolume(level)
        keys_arr, occ_vol, tsdf_vol = fuse_fragment_level(
            frag, prev_occ if level > 0 else None,
            h_global[level], occ_global[level], tsdf_global[level],
            params[level], heads[level], theta,
        )
        result.active_keys.append(keys_arr)
        result.occ.append(occ_vol)
        result.tsdf.append(tsdf_vol)
        prev_occ = occ_vol
    return result


def classical_fusion_step(
    depth_maps: list,
    cameras: list,
    global_tsdf: SparseVolume,
    spec: GridSpec,
    truncation: float = TRUNCATION_DEFAULT,
    max_depth: float = 3.0,
) -> SparseVolume:
    """Oracle path: standard weighted running-average TSDF integration.

    For each voxel of the fragment's allocation and each view with a depth
    at the voxel's pixel: sdf = depth(pixel) - voxel_depth; updates behind
    the surface by more than the truncation are skipped, the rest are
    clamped to +-truncation, normalized, and averaged into the volume.
    Depth lookups are nearest-pixel; missing-depth pixels contribute
    nothing. Uses the shared allocation and local-to-global merge machinery.
    """
    level = global_tsdf.level
    keys = allocate_fragment_keys(spec, level, cameras, max_depth)
    if not keys:
        return global_tsdf
    keys_arr = keys_to_array(keys)
    centers = key_centers(spec, level, keys_arr)

    sums = np.zeros(len(keys_arr))
    counts = np.zeros(len(keys_arr))
    for (k, pose), depth_map in zip(cameras, depth_maps):
        uv, d, vis = project_points(k, pose, centers)
        if not vis.any():
            continue
        ui = np.clip(np.floor(uv[vis, 0]).astype(np.int64), 0, k.width - 1)
        vi = np.clip(np.floor(uv[vis, 1]).astype(np.int64), 0, k.height - 1)
        depth_px = np.asarray(depth_map, dtype=np.float64)[vi, ui]
        sdf = depth_px - d[vis]
        ok = (depth_px > 0.0) & (sdf >= -truncation)
        s = np.clip(sdf, -truncation, truncation) / truncation
        idx = np.flatnonzero(vis)[ok]
        np.add.at(sums, idx, s[ok])
        np.add.at(counts, idx, 1.0)

    local = SparseVolume(level)
    touched = counts > 0
    for k, s, c in zip(keys_arr[touched].tolist(), sums[touched], counts[touched]):
        local.entries[tuple(k)] = TsdfVoxel(s / c, c)

    def combine(old: TsdfVoxel, new: TsdfVoxel) -> TsdfVoxel:
        w = old.weight + new.weight
        return TsdfVoxel((old.tsdf * old.weight + new.tsdf * new.weight) / w, w)

    return merge_local_into_global(local, global_tsdf, combine)
