"""Analytic test scenes: signed distance fields, exact depth rendering,
camera trajectories, and procedural grayscale images.

Primitives are solid boxes and spheres; "plane" rectangles are thin boxes
with a 2 cm slab thickness so the signed distance has an inside. Depth maps
use the z-depth convention (camera-frame z, matching geom.project) and the
-1.0 missing sentinel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Intrinsics, Pose, rotation_about_axis, rotation_angle
from .volume import GridSpec, SparseVolume, TsdfVoxel, key_centers

PLANE_SLAB_THICKNESS = 0.02
MISSING = -1.0

WALK_MAX_STEP_M = 0.1
WALK_MAX_STEP_DEG = 10.0


@dataclass(frozen=True)
class Primitive:
    """Solid primitive; ``kind`` is "box", "plane" (thin box) or "sphere".

    ``size`` is the full edge-length triple for boxes, (sx, sy, slab) for
    planes, and (r, r, r) for spheres. ``rotation`` maps local to world.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))


def box(center, size, rotation=None) -> Primitive:
    return Primitive("box", center, size, np.eye(3) if rotation is None else rotation)


def plane_rect(center, extent_x, extent_y, rotation=None) -> Primitive:
    """Thin one-sided rectangle realized as a slab box (local z = normal)."""
    return Primitive(
        "plane",
        center,
        (extent_x, extent_y, PLANE_SLAB_THICKNESS),
        np.eye(3) if rotation is None else rotation,
    )


def sphere(center, radius) -> Primitive:
    return Primitive("sphere", center, (radius, radius, radius))


@dataclass
class Scene:
    primitives: list

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of (N, 3) world points to the union of solids
        (negative inside)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        d = np.full(len(points), np.inf)
        for prim in self.primitives:
            d = np.minimum(d, _primitive_sdf(prim, points))
        return d

    def bounding_box(self):
        """Conservative AABB over all primitives."""
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for p in self.primitives:
            if p.kind == "sphere":
                r = p.size[0]
                lo = np.minimum(lo, p.center - r)
                hi = np.maximum(hi, p.center + r)
            else:
                half = p.size / 2.0
                corners = p.center + (_CUBE_SIGNS * half) @ p.rotation.T
                lo = np.minimum(lo, corners.min(axis=0))
                hi = np.maximum(hi, corners.max(axis=0))
        return lo, hi


_CUBE_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
)


def _primitive_sdf(prim: Primitive, points: np.ndarray) -> np.ndarray:
    local = (points - prim.center) @ prim.rotation  # rotate world into local frame
    if prim.kind == "sphere":
        return np.linalg.norm(local, axis=1) - prim.size[0]
    # exact box SDF
    q = np.abs(local) - prim.size / 2.0
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _ray_box(origins, dirs, prim: Primitive):
    """Slab-method intersection; returns entry parameter t (inf = miss)."""
    o = (origins - prim.center) @ prim.rotation
    d = dirs @ prim.rotation
    half = prim.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    # rays parallel to a slab: hit iff origin within that slab
    parallel = d == 0.0
    t1 = np.where(parallel, -np.inf, t1)
    t2 = np.where(parallel, np.inf, t2)
    inside_slab = np.abs(o) <= half
    t1 = np.where(parallel & ~inside_slab, np.inf, t1)
    t2 = np.where(parallel & ~inside_slab, -np.inf, t2)

    tnear = np.minimum(t1, t2).max(axis=1)
    tfar = np.maximum(t1, t2).min(axis=1)
    hit = (tfar >= tnear) & (tfar > 0.0)
    t = np.where(tnear > 0.0, tnear, tfar)  # origin inside box: exit point
    return np.where(hit, t, np.inf)


def _ray_sphere(origins, dirs, prim: Primitive):
    oc = origins - prim.center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - prim.size[0] ** 2
    disc = b * b - 4.0 * a * c
    t = np.full(len(origins), np.inf)
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    near = np.where(t0 > 0.0, t0, t1)
    t[ok & (near > 0.0)] = near[ok & (near > 0.0)]
    return t


def _raycast(scene: Scene, k: Intrinsics, pose: Pose):
    """Per-pixel nearest hit over primitives.

    Returns ``(depth (H, W), prim_id (H, W))`` with depth = ray parameter of
    the hit; rays are parameterized with camera-frame dir_z = 1 so the
    parameter IS the z-depth. prim_id is -1 where nothing is hit.
    """
    us, vs = np.meshgrid(
        np.arange(k.width, dtype=np.float64) + 0.5,
        np.arange(k.height, dtype=np.float64) + 0.5,
        indexing="xy",
    )
    dirs_cam = np.stack(
        [(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)

    best_t = np.full(len(dirs), np.inf)
    best_id = np.full(len(dirs), -1, dtype=np.int32)
    for i, prim in enumerate(scene.primitives):
        if prim.kind == "sphere":
            t = _ray_sphere(origins, dirs, prim)
        else:
            t = _ray_box(origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id[closer] = i
    best_t[best_t < 1e-9] = np.inf
    depth = np.where(np.isfinite(best_t), best_t, MISSING)
    return (
        depth.reshape(k.height, k.width).astype(np.float64),
        best_id.reshape(k.height, k.width),
    )


def raycast_depth(scene: Scene, k: Intrinsics, pose: Pose) -> np.ndarray:
    """Exact ground-truth z-depth map; -1 where no primitive is hit."""
    depth, _ = _raycast(scene, k, pose)
    return depth


def render_gray(scene: Scene, k: Intrinsics, pose: Pose) -> np.ndarray:
    """Procedural grayscale "color" image in [0, 1]: primitive-id shading
    mixed with depth falloff and a horizontal gradient. Enough texture to
    feed the feature encoder; not meant to look like anything."""
    depth, pid = _raycast(scene, k, pose)
    n = len(scene.primitives)
    us = (np.arange(k.width, dtype=np.float64) + 0.5) / k.width
    grad = np.broadcast_to(us, (k.height, k.width))
    hit = depth > 0.0
    shade = np.where(hit, (pid + 1) / (n + 1), 0.0)
    falloff = np.where(hit, np.clip(1.0 - depth / 4.0, 0.0, 1.0), 0.0)
    img = 0.45 * shade + 0.35 * falloff + 0.20 * grad * hit
    return img.astype(np.float32)


def gt_tsdf(
    scene: Scene,
    spec: GridSpec,
    level: int,
    truncation: float = 0.12,
) -> SparseVolume:
    """Analytic TSDF oracle: clamped, normalized signed distance per voxel.

    Voxels farther than ``truncation`` outside every solid are omitted;
    interior voxels are kept (clamped to -1) so the volume is watertight.
    """
    lo, hi = scene.bounding_box()
    lo = lo - truncation - spec.voxel_size(level)
    hi = hi + truncation + spec.voxel_size(level)
    lo_k = np.floor((lo - spec.origin) / spec.voxel_size(level)).astype(np.int64)
    hi_k = np.floor((hi - spec.origin) / spec.voxel_size(level)).astype(np.int64)
    axes = [np.arange(lo_k[d], hi_k[d] + 1, dtype=np.int64) for d in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    d = scene.sdf(key_centers(spec, level, grid))
    keep = d <= truncation
    vol = SparseVolume(level)
    tsdf = np.clip(d[keep], -truncation, truncation) / truncation
    for key, t in zip(grid[keep].tolist(), tsdf.tolist()):
        vol.entries[tuple(key)] = TsdfVoxel(t, 1.0)
    return vol


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-from-camera pose at ``position`` with +z (forward) toward
    ``target``; camera +y points as close to world -up as the constraint
    allows."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    nf = np.linalg.norm(forward)
    if nf < 1e-12:
        raise ValueError("camera position coincides with look-at target")
    f = forward / nf
    down = -np.asarray(up, dtype=np.float64)
    d = down - np.dot(down, f) * f
    nd = np.linalg.norm(d)
    if nd < 1e-9:
        # looking straight up/down: pick an arbitrary horizontal "down"
        d = np.array([1.0, 0.0, 0.0]) - f[0] * f
        nd = np.linalg.norm(d)
    d = d / nd
    r = np.cross(d, f)
    return Pose(np.stack([r, d, f], axis=1), position)


def make_trajectory(
    scene: Scene,
    n_frames: int,
    mode: str = "orbit",
    seed: int = 0,
    radius: float | None = None,
    z_amplitude: float = 0.0,
    z_cycles: int = 1,
    full_turns: float = 1.0,
) -> list:
    """Deterministic camera paths looking at the scene.

    ``orbit``: ``n_frames`` poses evenly spaced on a circle around the scene
    center (optionally a wavy circle when ``z_amplitude`` > 0, dipping below
    and rising above the orbit plane ``z_cycles`` times per revolution).
    ``walk``: seeded random walk with per-step limits of 0.1 m translation
    and 10 degrees rotation, always looking at the scene center.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    lo, hi = scene.bounding_box()
    center = (lo + hi) / 2.0
    extent = float(np.linalg.norm(hi - lo))
    if radius is None:
        radius = 0.9 * extent

    if mode == "orbit":
        poses = []
        for i in range(n_frames):
            theta = 2.0 * math.pi * full_turns * i / n_frames
            pos = center + np.array(
                [
                    radius * math.cos(theta),
                    radius * math.sin(theta),
                    z_amplitude * math.sin(z_cycles * theta + 0.7),
                ]
            )
            poses.append(look_at(pos, center))
        return poses

    if mode == "walk":
        rng = np.random.default_rng(seed)
        pos = center + np.array([radius, 0.0, 0.15 * extent])
        poses = [look_at(pos, center)]
        max_step = WALK_MAX_STEP_M
        for _ in range(n_frames - 1):
            for _attempt in range(64):
                step = rng.normal(0.0, max_step / 2.0, size=3)
                norm = np.linalg.norm(step)
                if norm > max_step:
                    step *= max_step / norm
                cand_pos = pos + step
                if np.linalg.norm(cand_pos - center) < 0.3 * extent:
                    continue  # keep a sane standoff distance
                cand = look_at(cand_pos, center)
                dr = rotation_angle(poses[-1].rotation.T @ cand.rotation)
                if math.degrees(dr) <= WALK_MAX_STEP_DEG:
                    break
            else:
                cand_pos, cand = pos, poses[-1]
            pos = cand_pos
            poses.append(cand)
        return poses

    raise ValueError(f"unknown trajectory mode {mode!r}")


def save_scene(path, scene: Scene) -> None:
    out = []
    for p in scene.primitives:
        entry = {"type": p.kind, "center": p.center.tolist()}
        if p.kind == "sphere":
            entry["radius"] = float(p.size[0])
        elif p.kind == "plane":
            entry["size"] = p.size[:2].tolist()
        else:
            entry["size"] = p.size.tolist()
        axis_angle = _rotation_to_axis_angle(p.rotation)
        if np.linalg.norm(axis_angle) > 0:
            entry["rotation"] = axis_angle.tolist()
        out.append(entry)
    with open(path, "w") as f:
        json.dump(out, f, indent=2)
        f.write("\n")


def load_scene(path) -> Scene:
    with open(path) as f:
        raw = json.load(f)
    prims = []
    for entry in raw:
        rot = np.eye(3)
        if "rotation" in entry:
            aa = np.asarray(entry["rotation"], dtype=np.float64)
            angle = np.linalg.norm(aa)
            if angle > 0:
                rot = rotation_about_axis(aa, angle)
        kind = entry["type"]
        if kind == "sphere":
            prims.append(sphere(entry["center"], entry["radius"]))
        elif kind == "plane":
            sx, sy = entry["size"][:2]
            prims.append(plane_rect(entry["center"], sx, sy, rot))
        elif kind == "box":
            prims.append(box(entry["center"], entry["size"], rot))
        else:
            raise ValueError(f"unknown primitive type {kind!r}")
    return Scene(prims)


def _rotation_to_axis_angle(r: np.ndarray) -> np.ndarray:
    angle = rotation_angle(r)
    if angle < 1e-12:
        return np.zeros(3)
    axis = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    n = np.linalg.norm(axis)
    if n < 1e-12:
        # 180-degree rotation: extract axis from R + I
        m = r + np.eye(3)
        axis = m[:, np.argmax(np.diag(m))]
        n = np.linalg.norm(axis)
    return axis / n * angle
