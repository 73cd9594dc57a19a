"""Sparse multi-scale voxel volumes and the key arithmetic around them.

A voxel key is an integer triple ``(ix, iy, iz)`` at a pyramid level; the
voxel center is ``origin + (i + 0.5) * voxel_size[level]`` per axis. Level 0
is the coarsest (0.16 m) and level 2 the finest (0.04 m); each level exactly
halves the voxel size of the previous one, so the 8 children of coarse key
``i`` are ``2i + {0,1}`` per axis and tile it exactly.

Sparse storage is a plain dict keyed by the integer triple. Wherever values
feed downstream math, iterate in sorted key order (``sorted_keys``) so runs
are bit-reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .geom import Intrinsics, Pose, project_points

VOLUME_MAGIC = b"SSTV"
VOLUME_VERSION = 1

# 21 bits per signed coordinate when packing a key into one int64
_PACK_BITS = 21
_PACK_OFFSET = 1 << (_PACK_BITS - 1)
_PACK_MASK = (1 << _PACK_BITS) - 1


class TsdfVoxel(NamedTuple):
    """Truncated signed distance (normalized to [-1, 1]) plus an
    accumulation weight used only by the classical-fusion oracle path."""

    tsdf: float
    weight: float = 1.0


@dataclass(frozen=True)
class GridSpec:
    """World-anchored voxel pyramid: shared origin, halving voxel sizes."""

    origin: np.ndarray
    voxel_sizes: tuple = (0.16, 0.08, 0.04)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        sizes = tuple(float(s) for s in self.voxel_sizes)
        for coarse, fine in zip(sizes, sizes[1:]):
            if not np.isclose(coarse, 2.0 * fine):
                raise ValueError(f"voxel sizes must halve per level, got {sizes}")
        object.__setattr__(self, "voxel_sizes", sizes)

    @property
    def levels(self) -> int:
        return len(self.voxel_sizes)

    @property
    def finest(self) -> int:
        return self.levels - 1

    def voxel_size(self, level: int) -> float:
        return self.voxel_sizes[level]

    @classmethod
    def default(cls, origin=(0.0, 0.0, 0.0)) -> "GridSpec":
        return cls(np.asarray(origin, dtype=np.float64))


class SparseVolume:
    """Sparse map from voxel keys to per-voxel payloads, all at one level."""

    def __init__(self, level: int, entries: dict | None = None):
        self.level = int(level)
        self.entries: dict = dict(entries) if entries else {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def get(self, key, default=None):
        return self.entries.get(key, default)

    def set(self, key, value) -> None:
        self.entries[key] = value

    def keys(self):
        return self.entries.keys()

    def sorted_keys(self) -> list:
        return sorted(self.entries.keys())

    def sorted_items(self) -> list:
        return sorted(self.entries.items())

    def copy(self) -> "SparseVolume":
        return SparseVolume(self.level, self.entries)


def world_to_key(spec: GridSpec, level: int, point) -> tuple:
    """Key of the voxel containing a world point (floor binning)."""
    p = (np.asarray(point, dtype=np.float64) - spec.origin) / spec.voxel_size(level)
    i = np.floor(p).astype(np.int64)
    return (int(i[0]), int(i[1]), int(i[2]))


def key_center(spec: GridSpec, level: int, key) -> np.ndarray:
    """World-space center of a voxel key."""
    return spec.origin + (np.asarray(key, dtype=np.float64) + 0.5) * spec.voxel_size(level)


def world_to_keys(spec: GridSpec, level: int, points: np.ndarray) -> np.ndarray:
    """Vectorized world_to_key over an (N, 3) array; returns (N, 3) int64."""
    p = (np.asarray(points, dtype=np.float64) - spec.origin) / spec.voxel_size(level)
    return np.floor(p).astype(np.int64)


def key_centers(spec: GridSpec, level: int, keys: np.ndarray) -> np.ndarray:
    """Vectorized voxel centers for an (N, 3) int key array."""
    return spec.origin + (np.asarray(keys, dtype=np.float64) + 0.5) * spec.voxel_size(level)


def keys_to_array(keys: Iterable) -> np.ndarray:
    arr = np.array(sorted(keys), dtype=np.int64)
    return arr.reshape(-1, 3)


def array_to_keys(arr: np.ndarray) -> list:
    return [(int(a), int(b), int(c)) for a, b, c in np.asarray(arr, dtype=np.int64)]


def pack_keys(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) int keys into int64 codes ordered like the tuple order."""
    k = np.asarray(keys, dtype=np.int64) + _PACK_OFFSET
    if np.any((k < 0) | (k > _PACK_MASK)):
        raise ValueError("voxel index out of packable range (+-2^20)")
    return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]


def unpack_keys(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.int64)
    return np.stack(
        [
            (c >> (2 * _PACK_BITS)) - _PACK_OFFSET,
            ((c >> _PACK_BITS) & _PACK_MASK) - _PACK_OFFSET,
            (c & _PACK_MASK) - _PACK_OFFSET,
        ],
        axis=1,
    )


def _frustum_planes(k: Intrinsics, max_depth: float) -> np.ndarray:
    """Inward-pointing unit plane normals + offsets in the camera frame.

    A camera-frame point p is inside the (open-image-bound) frustum iff
    ``n . p + d > 0`` for every row ``(n, d)``; offsetting ``d`` by a margin
    gives a conservative superset test used during the coarse descent.
    """
    planes = [
        (np.array([k.fx, 0.0, k.cx]), 0.0),  # u >= 0
        (np.array([-k.fx, 0.0, k.width - k.cx]), 0.0),  # u < width
        (np.array([0.0, k.fy, k.cy]), 0.0),  # v >= 0
        (np.array([0.0, -k.fy, k.height - k.cy]), 0.0),  # v < height
        (np.array([0.0, 0.0, 1.0]), 0.0),  # z > 0
        (np.array([0.0, 0.0, -1.0]), max_depth),  # z <= max_depth
    ]
    rows = []
    for n, d in planes:
        norm = np.linalg.norm(n)
        rows.append(np.concatenate([n / norm, [d / norm]]))
    return np.asarray(rows)


def _coarse_frustum_candidates(spec: GridSpec, level: int, k: Intrinsics, pose: Pose,
                               max_depth: float) -> np.ndarray:
    """Level keys whose voxels can intersect the frustum (conservative)."""
    margin = 0.5 * np.sqrt(3.0) * spec.voxel_size(level)
    pts = [pose.center]
    for u, v in ((0.0, 0.0), (k.width, 0.0), (0.0, k.height), (k.width, k.height)):
        ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
        pts.append(pose.rotation @ (ray * max_depth) + pose.translation)
    pts = np.asarray(pts)
    lo = world_to_keys(spec, level, (pts.min(axis=0) - margin)[None, :])[0]
    hi = world_to_keys(spec, level, (pts.max(axis=0) + margin)[None, :])[0]
    axes = [np.arange(lo[d], hi[d] + 1, dtype=np.int64) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[_in_dilated_frustum(spec, level, grid, k, pose, max_depth, margin)]


def _in_dilated_frustum(spec, level, keys, k, pose, max_depth, margin) -> np.ndarray:
    planes = _frustum_planes(k, max_depth)
    p_cam = (key_centers(spec, level, keys) - pose.translation) @ pose.rotation
    dist = p_cam @ planes[:, :3].T + planes[:, 3]
    return (dist > -margin).all(axis=1)


def _children(keys: np.ndarray) -> np.ndarray:
    offs = np.stack(np.meshgrid([0, 1], [0, 1], [0, 1], indexing="ij"), axis=-1).reshape(-1, 3)
    return (2 * keys[:, None, :] + offs[None, :, :]).reshape(-1, 3)


def allocate_fragment_keys(
    spec: GridSpec,
    level: int,
    cameras: list,
    max_depth: float = 3.0,
) -> set:
    """Keys whose centers lie inside at least one camera frustum (depth capped
    at ``max_depth``), dilated by one voxel of margin.

    The margin gives surfaces near frustum borders the neighborhood support
    sparse convolutions need. Fine levels descend through conservative
    coarse supersets (voxel half-diagonal plane margins), so membership is
    exact but the full fine-level bounding box is never enumerated.
    """
    if not cameras:
        raise ValueError("allocate_fragment_keys needs at least one camera")
    if max_depth <= 0.0:
        return set()

    in_codes: list = []
    for k, pose in cameras:
        cand = _coarse_frustum_candidates(spec, 0, k, pose, max_depth)
        for lvl in range(1, level + 1):
            cand = _children(cand)
            margin = 0.5 * np.sqrt(3.0) * spec.voxel_size(lvl)
            cand = cand[_in_dilated_frustum(spec, lvl, cand, k, pose, margin=margin,
                                            max_depth=max_depth)]
        if len(cand) == 0:
            continue
        _, depth, valid = project_points(k, pose, key_centers(spec, level, cand))
        valid &= depth <= max_depth
        if valid.any():
            in_codes.append(pack_keys(cand[valid]))

    if not in_codes:
        return set()
    core = np.unique(np.concatenate(in_codes))

    # One-voxel dilation, done in packed space (field carries cannot occur at
    # sane scene scales).
    deltas = np.array(
        [
            (dx << (2 * _PACK_BITS)) + (dy << _PACK_BITS) + dz
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)
        ],
        dtype=np.int64,
    )
    dilated = np.unique((core[:, None] + deltas[None, :]).ravel())
    return set(map(tuple, unpack_keys(dilated).tolist()))


def upsample_occupied(coarse: SparseVolume, theta: float, finest_level: int = 2) -> set:
    """Children (at level+1) of every coarse key whose occupancy >= theta."""
    if coarse.level >= finest_level:
        raise ValueError(f"cannot upsample level {coarse.level}: already at the finest level")
    fine = set()
    for (ix, iy, iz), occ in coarse.entries.items():
        if occ < theta:
            continue
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    fine.add((2 * ix + a, 2 * iy + b, 2 * iz + c))
    return fine


def merge_local_into_global(
    local: SparseVolume,
    global_vol: SparseVolume,
    policy: str | Callable = "replace",
) -> SparseVolume:
    """Write a fragment's voxels into the persistent volume.

    ``policy`` is ``"replace"`` (local wins on overlap) or a callable
    ``combine(old_value, new_value) -> merged`` applied on overlapping keys.
    Keys only in ``global_vol`` are untouched. Mutates and returns
    ``global_vol``.
    """
    if local.level != global_vol.level:
        raise ValueError(f"level mismatch: local={local.level} global={global_vol.level}")
    if policy == "replace":
        global_vol.entries.update(local.entries)
        return global_vol
    if not callable(policy):
        raise ValueError(f"unknown merge policy {policy!r}")
    for key, value in local.entries.items():
        old = global_vol.entries.get(key)
        global_vol.entries[key] = value if old is None else policy(old, value)
    return global_vol


def save_tsdf_volume(path, vol: SparseVolume, spec: GridSpec) -> None:
    """Binary TSDF dump: SSTV header then (ix, iy, iz, tsdf) records.

    Header layout (little-endian): magic ``SSTV``, u32 version, i32 level,
    f64 voxel_size, 3x f64 origin, u64 record count. Weights are not stored.
    """
    items = vol.sorted_items()
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<Ii", VOLUME_VERSION, vol.level))
        f.write(struct.pack("<d", spec.voxel_size(vol.level)))
        f.write(struct.pack("<3d", *spec.origin))
        f.write(struct.pack("<Q", len(items)))
        if items:
            rec = np.empty(len(items), dtype=[("k", "<i4", 3), ("t", "<f4")])
            rec["k"] = np.array([k for k, _ in items], dtype=np.int32)
            rec["t"] = np.array(
                [v.tsdf if isinstance(v, TsdfVoxel) else float(v) for _, v in items],
                dtype=np.float32,
            )
            f.write(rec.tobytes())


def load_tsdf_volume(path):
    """Read an SSTV dump; returns ``(SparseVolume[TsdfVoxel], voxel_size, origin)``."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != VOLUME_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
        version, level = struct.unpack("<Ii", f.read(8))
        if version != VOLUME_VERSION:
            raise ValueError(f"unsupported volume version {version}")
        (voxel_size,) = struct.unpack("<d", f.read(8))
        origin = np.array(struct.unpack("<3d", f.read(24)))
        (count,) = struct.unpack("<Q", f.read(8))
        vol = SparseVolume(level)
        if count:
            rec = np.frombuffer(f.read(count * 16), dtype=[("k", "<i4", 3), ("t", "<f4")])
            for (ix, iy, iz), t in zip(rec["k"].tolist(), rec["t"].tolist()):
                vol.entries[(ix, iy, iz)] = TsdfVoxel(float(t), 1.0)
    return vol, voxel_size, origin
