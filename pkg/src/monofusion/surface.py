"""Surface extraction from the finest TSDF level and mesh depth rendering.

Marching cubes runs over the sparse volume directly: a cube is anchored at a
voxel key and its corners are the 8 surrounding voxel centers. Corners
missing from the sparse volume read as +1 (outside truncation), so
unobserved space never produces interior surfaces and the mesh closes at
volume borders. Vertices are welded by global edge identity, which makes
topology checks (Euler characteristic) meaningful.

Depth rendering casts one ray per pixel center through a median-split
triangle BVH with exact nearest-hit selection by ray parameter; rays are
parameterized so the parameter equals z-depth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geom import Intrinsics, Pose
from .volume import (
    GridSpec,
    SparseVolume,
    TsdfVoxel,
    key_centers,
    keys_to_array,
    pack_keys,
    unpack_keys,
)
from .mc_tables import CORNER_OFFSETS, CORNER_PAIRS, EDGE_MASKS, TRI_TABLE

MISSING_CORNER_VALUE = 1.0
_LEAF_SIZE = 8

# (corner at the low end of the edge, axis the edge runs along): canonical
# identity of each of the 12 cube edges, shared between adjacent cubes
_EDGE_CANON = np.array(
    [
        [0, 0], [1, 1], [3, 0], [0, 1],
        [4, 0], [5, 1], [7, 0], [4, 1],
        [0, 2], [1, 2], [2, 2], [3, 2],
    ],
    dtype=np.int64,
)

_EID_OFFSET = 1 << 19
_EID_MASK = (1 << 20) - 1


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int32
    normals: np.ndarray | None = None  # (V, 3) float64, unit

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_corners(self) -> np.ndarray:
        """(T, 3, 3) corner positions."""
        return self.vertices[self.triangles]

    def area(self) -> float:
        if self.is_empty:
            return 0.0
        c = self.triangle_corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return float(0.5 * np.linalg.norm(cross, axis=1).sum())

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.empty((0, 3)), np.empty((0, 3), dtype=np.int32))


def _edge_ids(corner_keys: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """Pack (key of the low edge endpoint, axis) into one int64."""
    k = corner_keys + _EID_OFFSET
    if np.any((k < 0) | (k > _EID_MASK)):
        raise ValueError("voxel index out of edge-id range")
    return (k[:, 0] << 42) | (k[:, 1] << 22) | (k[:, 2] << 2) | axis


def marching_cubes(tsdf: SparseVolume, spec: GridSpec) -> Mesh:
    """Triangulate the 0-isosurface of a finest-level sparse TSDF volume."""
    if tsdf.level != spec.finest:
        raise ValueError(f"marching cubes expects the finest level ({spec.finest}), got {tsdf.level}")
    if len(tsdf) == 0:
        return Mesh.empty()

    keys = keys_to_array(tsdf.keys())
    vals = np.array(
        [v.tsdf if isinstance(v, TsdfVoxel) else float(v) for v in
         (tsdf.entries[tuple(k)] for k in keys.tolist())],
        dtype=np.float64,
    )
    codes = pack_keys(keys)

    # candidate anchors: any cube with at least one active corner
    anchors = unpack_keys(
        np.unique(pack_keys((keys[:, None, :] - CORNER_OFFSETS[None, :, :]).reshape(-1, 3)))
    )

    corner_vals = np.full((len(anchors), 8), MISSING_CORNER_VALUE)
    for ci in range(8):
        ckeys = pack_keys(anchors + CORNER_OFFSETS[ci])
        pos = np.searchsorted(codes, ckeys)
        pos_c = np.minimum(pos, len(codes) - 1)
        found = codes[pos_c] == ckeys
        corner_vals[found, ci] = vals[pos_c[found]]

    case = ((corner_vals < 0.0) << np.arange(8)).sum(axis=1)
    emit = EDGE_MASKS[case] != 0
    if not emit.any():
        return Mesh.empty()
    anchors = anchors[emit]
    corner_vals = corner_vals[emit]
    case = case[emit]
    n_cubes = len(anchors)

    # one interpolated vertex per (cube, used edge slot), welded by edge id
    slot_vertex = np.full((n_cubes, 12), -1, dtype=np.int64)
    all_ids = []
    all_pos = []
    total = 0
    for e in range(12):
        sel = (EDGE_MASKS[case] >> e) & 1 == 1
        if not sel.any():
            continue
        ca, cb = CORNER_PAIRS[e]
        va = corner_vals[sel, ca]
        vb = corner_vals[sel, cb]
        t = np.clip(va / (va - vb), 0.0, 1.0)
        pa = key_centers(spec, tsdf.level, anchors[sel] + CORNER_OFFSETS[ca])
        pb = key_centers(spec, tsdf.level, anchors[sel] + CORNER_OFFSETS[cb])
        all_pos.append(pa + t[:, None] * (pb - pa))
        low_corner, axis = _EDGE_CANON[e]
        all_ids.append(_edge_ids(anchors[sel] + CORNER_OFFSETS[low_corner], axis))
        count = int(sel.sum())
        slot_vertex[sel, e] = total + np.arange(count)
        total += count

    ids = np.concatenate(all_ids)
    positions = np.concatenate(all_pos)
    uniq, inverse = np.unique(ids, return_inverse=True)
    vertices = np.empty((len(uniq), 3))
    vertices[inverse] = positions  # duplicates write identical coordinates

    tri_slots = TRI_TABLE[case][:, :15].reshape(n_cubes, 5, 3)
    valid = tri_slots[:, :, 0] >= 0
    cube_idx = np.broadcast_to(np.arange(n_cubes)[:, None, None], tri_slots.shape)
    local = slot_vertex[cube_idx[valid], np.maximum(tri_slots[valid], 0)]
    triangles = inverse[local.reshape(-1, 3)]

    # drop degenerate triangles (repeated welded vertex or exact zero area)
    a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    distinct = (a != b) & (b != c) & (a != c)
    triangles = triangles[distinct]
    corners = vertices[triangles]
    area2 = np.linalg.norm(np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]), axis=1)
    triangles = triangles[area2 > 0.0]

    mesh = Mesh(vertices, triangles.astype(np.int32))
    mesh.normals = _vertex_normals(mesh)
    return mesh


def _vertex_normals(mesh: Mesh) -> np.ndarray:
    normals = np.zeros_like(mesh.vertices)
    if mesh.is_empty:
        return normals
    c = mesh.triangle_corners()
    face_n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # area-weighted
    for i in range(3):
        np.add.at(normals, mesh.triangles[:, i], face_n)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norm, 1e-30)


# ---------------------------------------------------------------------------
# depth rendering


class _Bvh:
    """Median-split BVH over triangles; flat arrays, packet traversal."""

    def __init__(self, tri_corners: np.ndarray):
        self.tri = tri_corners
        lo = tri_corners.min(axis=1)
        hi = tri_corners.max(axis=1)
        centroids = tri_corners.mean(axis=1)

        self.bb_lo = []
        self.bb_hi = []
        self.left = []
        self.right = []
        self.start = []
        self.count = []
        self.order = np.arange(len(tri_corners))

        def build(idx: np.ndarray) -> int:
            node = len(self.bb_lo)
            self.bb_lo.append(lo[idx].min(axis=0))
            self.bb_hi.append(hi[idx].max(axis=0))
            self.left.append(-1)
            self.right.append(-1)
            self.start.append(-1)
            self.count.append(0)
            if len(idx) <= _LEAF_SIZE:
                self.start[node] = len(self._leaf_tris)
                self.count[node] = len(idx)
                self._leaf_tris.extend(idx.tolist())
                return node
            cent = centroids[idx]
            axis = int(np.argmax(cent.max(axis=0) - cent.min(axis=0)))
            half = len(idx) // 2
            part = np.argpartition(cent[:, axis], half)
            self.left[node] = build(idx[part[:half]])
            self.right[node] = build(idx[part[half:]])
            return node

        self._leaf_tris: list = []
        build(np.arange(len(tri_corners)))
        self.bb_lo = np.asarray(self.bb_lo)
        self.bb_hi = np.asarray(self.bb_hi)
        self.left = np.asarray(self.left)
        self.right = np.asarray(self.right)
        self.start = np.asarray(self.start)
        self.count = np.asarray(self.count)
        self.leaf_tris = np.asarray(self._leaf_tris, dtype=np.int64)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Nearest positive hit parameter per ray (inf where no hit).

        All rays share one origin. Recursion over nodes carries only the
        subset of rays whose AABB entry beats their current best hit.
        """
        n = len(dirs)
        best = np.full(n, np.inf)
        inv = np.where(dirs != 0.0, 1.0 / np.where(dirs == 0.0, 1.0, dirs), np.inf)

        def aabb(node: int, idx: np.ndarray) -> np.ndarray:
            t1 = (self.bb_lo[node] - origin) * inv[idx]
            t2 = (self.bb_hi[node] - origin) * inv[idx]
            tnear = np.minimum(t1, t2).max(axis=1)
            tfar = np.maximum(t1, t2).min(axis=1)
            return idx[(tfar >= np.maximum(tnear, 0.0)) & (tnear < best[idx])]

        def visit(node: int, idx: np.ndarray) -> None:
            idx = aabb(node, idx)
            if len(idx) == 0:
                return
            if self.left[node] < 0:
                tris = self.tri[self.leaf_tris[self.start[node]: self.start[node] + self.count[node]]]
                t = _moller_trumbore(origin, dirs[idx], tris)
                np.minimum.at(best, idx, t.min(axis=1))
                return
            visit(self.left[node], idx)
            visit(self.right[node], idx)

        visit(0, np.arange(n))
        return best


def _moller_trumbore(origin: np.ndarray, dirs: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Ray-triangle intersection parameters, (R, L); inf where missed.

    Inclusive edge tests so rays hitting shared edges register on at least
    one of the adjacent triangles."""
    eps = 1e-12
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    p = np.cross(dirs[:, None, :], e2[None, :, :])  # (R, L, 3)
    det = np.einsum("le,rle->rl", e1, p)
    ok = np.abs(det) > eps
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = origin - v0  # (L, 3)
    u = np.einsum("le,rle->rl", s, p) * inv_det
    q = np.cross(s, e1)  # (L, 3)
    v = np.einsum("re,le->rl", dirs, q) * inv_det
    t = np.einsum("le,le->l", e2, q)[None, :] * inv_det
    hit = ok & (u >= -1e-10) & (v >= -1e-10) & (u + v <= 1.0 + 1e-10) & (t > 1e-9)
    return np.where(hit, t, np.inf)


def render_depth(mesh: Mesh, k: Intrinsics, pose: Pose) -> np.ndarray:
    """Render per-pixel nearest-intersection z-depth of a mesh; -1 where the
    pixel's ray misses everything."""
    if mesh.is_empty:
        raise ValueError("cannot render an empty mesh")
    us, vs = np.meshgrid(
        np.arange(k.width, dtype=np.float64) + 0.5,
        np.arange(k.height, dtype=np.float64) + 0.5,
        indexing="xy",
    )
    dirs_cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones_like(us)], axis=-1)
    dirs = dirs_cam.reshape(-1, 3) @ pose.rotation.T
    bvh = _Bvh(mesh.triangle_corners())
    t = bvh.intersect(pose.translation, dirs)
    depth = np.where(np.isfinite(t), t, -1.0)
    return depth.reshape(k.height, k.width)


# ---------------------------------------------------------------------------
# PLY I/O (binary little-endian)


def save_ply(path, mesh: Mesh) -> None:
    has_normals = mesh.normals is not None and len(mesh.normals) == len(mesh.vertices)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}"]
    header += ["property float x", "property float y", "property float z"]
    if has_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    header += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if has_normals:
            vdata = np.hstack([mesh.vertices, mesh.normals]).astype("<f4")
        else:
            vdata = mesh.vertices.astype("<f4")
        f.write(vdata.tobytes())
        if len(mesh.triangles):
            face = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            face["n"] = 3
            face["idx"] = mesh.triangles
            f.write(face.tobytes())


def load_ply(path) -> Mesh:
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError("not a PLY file")
        n_vertex = n_face = 0
        vertex_props: list = []
        element = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            parts = line.split()
            if parts[0] == b"end_header":
                break
            if parts[0] == b"format" and parts[1] != b"binary_little_endian":
                raise ValueError("only binary little-endian PLY is supported")
            if parts[0] == b"element":
                element = parts[1]
                if element == b"vertex":
                    n_vertex = int(parts[2])
                elif element == b"face":
                    n_face = int(parts[2])
            if parts[0] == b"property" and element == b"vertex":
                if parts[1] != b"float":
                    raise ValueError("only float vertex properties are supported")
                vertex_props.append(parts[2].decode())
        width = len(vertex_props)
        vdata = np.frombuffer(f.read(4 * width * n_vertex), dtype="<f4").reshape(n_vertex, width)
        xyz = vdata[:, [vertex_props.index(a) for a in ("x", "y", "z")]].astype(np.float64)
        normals = None
        if all(a in vertex_props for a in ("nx", "ny", "nz")):
            normals = vdata[:, [vertex_props.index(a) for a in ("nx", "ny", "nz")]].astype(np.float64)
        tris = np.empty((n_face, 3), dtype=np.int32)
        for i in range(n_face):
            (cnt,) = struct.unpack("<B", f.read(1))
            if cnt != 3:
                raise ValueError("only triangle faces are supported")
            tris[i] = struct.unpack("<3i", f.read(12))
    mesh = Mesh(xyz, tris)
    mesh.normals = normals
    return mesh
