import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monofusion import synth
from monofusion.geom import Intrinsics, project_points
from monofusion.volume import (
    GridSpec,
    SparseVolume,
    TsdfVoxel,
    allocate_fragment_keys,
    key_center,
    key_centers,
    load_tsdf_volume,
    merge_local_into_global,
    pack_keys,
    save_tsdf_volume,
    unpack_keys,
    upsample_occupied,
    world_to_key,
    world_to_keys,
)


@pytest.fixture
def spec():
    return GridSpec.default()


class TestKeyArithmetic:
    def test_point_to_key(self, spec):
        assert world_to_key(spec, 2, (0.02, 0.02, 0.02)) == (0, 0, 0)

    def test_key_to_center(self, spec):
        np.testing.assert_allclose(key_center(spec, 2, (0, 0, 0)), [0.02, 0.02, 0.02])

    def test_negative_coordinate_floors(self, spec):
        # floor(-0.01 / 0.04) = -1
        assert world_to_key(spec, 2, (-0.01, 0.0, 0.0))[0] == -1

    @settings(max_examples=200, deadline=None)
    @given(
        st.tuples(*[st.integers(-500, 500)] * 3),
        st.integers(0, 2),
    )
    def test_center_round_trip(self, key, level):
        spec = GridSpec.default()
        assert world_to_key(spec, level, key_center(spec, level, key)) == key

    def test_pack_unpack(self):
        rng = np.random.default_rng(1)
        keys = rng.integers(-100000, 100000, size=(1000, 3))
        np.testing.assert_array_equal(unpack_keys(pack_keys(keys)), keys)

    def test_pack_order_matches_tuple_order(self):
        rng = np.random.default_rng(2)
        keys = rng.integers(-50, 50, size=(500, 3))
        tuples = sorted(map(tuple, keys.tolist()))
        packed_sorted = unpack_keys(np.sort(pack_keys(keys)))
        assert list(map(tuple, packed_sorted.tolist())) == tuples

    def test_voxel_sizes_must_halve(self):
        with pytest.raises(ValueError):
            GridSpec((0, 0, 0), (0.16, 0.09, 0.04))


class TestAllocation:
    def test_needs_cameras(self, spec):
        with pytest.raises(ValueError):
            allocate_fragment_keys(spec, 0, [], 3.0)

    def test_zero_depth_empty(self, spec, cam64):
        pose = synth.look_at((1.0, 0.0, 0.5), (0, 0, 0))
        assert allocate_fragment_keys(spec, 0, [(cam64, pose)], 0.0) == set()

    def test_far_voxel_excluded(self, spec, cam64):
        pose = synth.look_at((0.0, 0.0, 0.0), (0, 0, 1.0), up=(0, 1, 0))
        keys = allocate_fragment_keys(spec, 0, [(cam64, pose)], 3.0)
        far = world_to_key(spec, 0, (0.0, 0.0, 10.0))
        assert far not in keys

    @pytest.mark.parametrize("level", [0, 1])
    def test_matches_bbox_scan_oracle(self, spec, cam64, level):
        cameras = [
            (cam64, synth.look_at((1.5, 0.3, 0.8), (0, 0, 0.1))),
            (cam64, synth.look_at((-1.2, 0.5, 0.5), (0, 0, 0.1))),
        ]
        max_depth = 3.0
        fast = allocate_fragment_keys(spec, level, cameras, max_depth)

        # oracle: exhaustively test every key center in the frustum bbox
        pts = []
        for k, pose in cameras:
            pts.append(pose.center)
            for u, v in ((0, 0), (k.width, 0), (0, k.height), (k.width, k.height)):
                ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
                pts.append(pose.rotation @ (ray * max_depth) + pose.translation)
        pts = np.asarray(pts)
        lo = world_to_keys(spec, level, pts.min(axis=0)[None])[0] - 1
        hi = world_to_keys(spec, level, pts.max(axis=0)[None])[0] + 1
        axes = [np.arange(lo[d], hi[d] + 1) for d in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        inside = np.zeros(len(grid), bool)
        for k, pose in cameras:
            _, depth, valid = project_points(k, pose, key_centers(spec, level, grid))
            inside |= valid & (depth <= max_depth)
        oracle = set()
        for key in grid[inside].tolist():
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        oracle.add((key[0] + dx, key[1] + dy, key[2] + dz))
        assert fast == oracle


class TestUpsample:
    def test_empty(self):
        assert upsample_occupied(SparseVolume(0), 0.5) == set()

    def test_single_parent_spawns_8_children(self):
        vol = SparseVolume(0, {(1, 2, 3): 0.9})
        children = upsample_occupied(vol, 0.5)
        assert len(children) == 8
        assert children == {(2 + a, 4 + b, 6 + c) for a in (0, 1) for b in (0, 1) for c in (0, 1)}

    def test_below_threshold_dropped(self):
        vol = SparseVolume(0, {(0, 0, 0): 0.49, (5, 5, 5): 0.5})
        children = upsample_occupied(vol, 0.5)
        assert len(children) == 8
        assert (10, 10, 10) in children

    def test_adjacent_parents_disjoint_children(self):
        vol = SparseVolume(1, {(0, 0, 0): 1.0, (1, 0, 0): 1.0})
        children = upsample_occupied(vol, 0.5)
        assert len(children) == 16  # 8 each, no overlap

    def test_count_is_8_per_passing_parent(self):
        rng = np.random.default_rng(3)
        entries = {
            (int(a), int(b), int(c)): float(o)
            for (a, b, c), o in zip(rng.integers(-20, 20, (100, 3)), rng.random(100))
        }
        vol = SparseVolume(0, entries)
        passing = sum(1 for occ in entries.values() if occ >= 0.5)
        assert len(upsample_occupied(vol, 0.5)) == 8 * passing

    def test_children_tile_parent_geometrically(self, spec):
        children = upsample_occupied(SparseVolume(1, {(3, -2, 5): 1.0}), 0.0)
        parent_center = key_center(spec, 1, (3, -2, 5))
        for child in children:
            delta = np.abs(key_center(spec, 2, child) - parent_center)
            np.testing.assert_allclose(delta, 0.02)

    def test_finest_level_rejected(self):
        with pytest.raises(ValueError):
            upsample_occupied(SparseVolume(2, {(0, 0, 0): 1.0}), 0.5)


class TestMerge:
    def test_into_empty(self):
        local = SparseVolume(1, {(0, 0, 0): 1.0, (1, 1, 1): 2.0})
        merged = merge_local_into_global(local, SparseVolume(1), "replace")
        assert merged.entries == local.entries

    def test_disjoint_union(self):
        local = SparseVolume(0, {(0, 0, 0): 1.0})
        glob = SparseVolume(0, {(5, 5, 5): 2.0})
        merged = merge_local_into_global(local, glob, "replace")
        assert len(merged) == 2

    def test_replace_local_wins(self):
        local = SparseVolume(0, {(0, 0, 0): 1.0})
        glob = SparseVolume(0, {(0, 0, 0): 9.0, (1, 1, 1): 3.0})
        merged = merge_local_into_global(local, glob, "replace")
        assert merged.entries[(0, 0, 0)] == 1.0
        assert merged.entries[(1, 1, 1)] == 3.0

    def test_replace_is_idempotent(self):
        local = SparseVolume(0, {(0, 0, 0): 1.0, (2, 2, 2): 4.0})
        glob = SparseVolume(0, {(0, 0, 0): 9.0})
        once = merge_local_into_global(local, glob, "replace").copy()
        twice = merge_local_into_global(local, glob, "replace")
        assert once.entries == twice.entries

    def test_combine_policy(self):
        local = SparseVolume(0, {(0, 0, 0): 1.0})
        glob = SparseVolume(0, {(0, 0, 0): 3.0})
        merged = merge_local_into_global(local, glob, lambda old, new: old + new)
        assert merged.entries[(0, 0, 0)] == 4.0

    def test_level_mismatch(self):
        with pytest.raises(ValueError):
            merge_local_into_global(SparseVolume(0), SparseVolume(1), "replace")


def test_tsdf_dump_round_trip(tmp_path, spec):
    rng = np.random.default_rng(7)
    vol = SparseVolume(2)
    for key, t in zip(rng.integers(-40, 40, (200, 3)).tolist(), rng.uniform(-1, 1, 200)):
        vol.entries[tuple(key)] = TsdfVoxel(float(np.float32(t)), 2.0)
    path = tmp_path / "vol.sstv"
    save_tsdf_volume(path, vol, spec)
    loaded, voxel_size, origin = load_tsdf_volume(path)
    assert loaded.level == 2
    assert voxel_size == spec.voxel_size(2)
    np.testing.assert_allclose(origin, spec.origin)
    assert set(loaded.keys()) == set(vol.keys())
    for key in vol.keys():
        assert loaded.entries[key].tsdf == pytest.approx(vol.entries[key].tsdf, abs=1e-7)

    with open(path, "rb") as f:
        assert f.read(4) == b"SSTV"
