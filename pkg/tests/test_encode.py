import numpy as np
import pytest

from monofusion import synth
from monofusion.encode import (
    COLOR_CHANNELS,
    GEO_CHANNELS,
    backproject_features,
    bilinear_sample,
    conv2d,
    encode_image,
    encode_prior,
    init_encoder_weights,
)
from monofusion.geom import Intrinsics, Pose, project
from monofusion.priors import MISSING, GeometryPrior, make_prior
from monofusion.volume import GridSpec, key_center, keys_to_array
from monofusion.weights import load_weights, save_weights


@pytest.fixture(scope="module")
def store():
    return init_encoder_weights(seed=0)


class TestEncodeImage:
    def test_output_shapes_64(self, store):
        maps = encode_image(np.zeros((64, 64), dtype=np.float32), store)
        assert [(m.data.shape, m.stride) for m in maps] == [
            ((16, 16, 80), 4),
            ((32, 32, 40), 2),
            ((64, 64, 24), 1),
        ]

    def test_channel_plan(self, store):
        maps = encode_image(np.zeros((32, 48), dtype=np.float32), store)
        assert tuple(m.channels for m in maps) == COLOR_CHANNELS

    def test_zero_input_zero_output(self, store):
        maps = encode_image(np.zeros((32, 32), dtype=np.float32), store)
        for m in maps:
            assert np.all(m.data == 0.0)

    def test_deterministic(self, store):
        rng = np.random.default_rng(1)
        img = rng.random((32, 32)).astype(np.float32)
        a = encode_image(img, store)
        b = encode_image(img, store)
        for ma, mb in zip(a, b):
            np.testing.assert_array_equal(ma.data, mb.data)

    def test_rejects_bad_dimensions(self, store):
        with pytest.raises(ValueError):
            encode_image(np.zeros((30, 32), dtype=np.float32), store)


class TestEncodePrior:
    def test_shapes_and_channels(self, store):
        prior = GeometryPrior.empty(64, 64)
        maps = encode_prior(prior, store)
        assert [(m.data.shape[-1], m.stride) for m in maps] == [(8, 4), (8, 2), (8, 1)]
        assert maps[0].data.shape[:2] == (16, 16)

    def test_empty_prior_zero_features(self, store):
        maps = encode_prior(GeometryPrior.empty(32, 32), store)
        for m in maps:
            assert np.all(m.data == 0.0)

    def test_seed_reproducible(self):
        rng = np.random.default_rng(2)
        sd = np.where(rng.random((32, 32)) < 0.2, 1.5, MISSING).astype(np.float32)
        err = np.where(sd >= 0, 0.5, MISSING).astype(np.float32)
        prior = make_prior(sd, err, 1.0)
        a = encode_prior(prior, init_encoder_weights(seed=5))
        b = encode_prior(prior, init_encoder_weights(seed=5))
        for ma, mb in zip(a, b):
            np.testing.assert_array_equal(ma.data, mb.data)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(3)
        x = rng.random((8, 8, 3)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        w[1, 1] = np.eye(3)
        np.testing.assert_array_equal(conv2d(x, w, np.zeros(3, dtype=np.float32)), x)

    def test_box_filter_interior_by_hand(self):
        x = np.arange(25, dtype=np.float32).reshape(5, 5, 1)
        w = np.ones((3, 3, 1, 1), dtype=np.float32)
        y = conv2d(x, w, np.zeros(1, dtype=np.float32))
        assert y[2, 2, 0] == x[1:4, 1:4, 0].sum()

    def test_stride_two_halves_resolution(self):
        x = np.zeros((16, 12, 2), dtype=np.float32)
        w = np.zeros((3, 3, 2, 4), dtype=np.float32)
        y = conv2d(x, w, np.zeros(4, dtype=np.float32), stride=2)
        assert y.shape == (8, 6, 4)


class TestBilinear:
    def test_exact_at_cell_center(self):
        rng = np.random.default_rng(4)
        data = rng.random((6, 6, 3)).astype(np.float32)
        # continuous coordinate of cell (2, 3) center at stride 1 is (3.5, 2.5)
        out = bilinear_sample(data, np.array([[3.5, 2.5]]), stride=1)
        np.testing.assert_array_equal(out[0], data[2, 3])

    def test_midpoint_averages_two_cells(self):
        data = np.zeros((2, 2, 1), dtype=np.float32)
        a, b = 3.0, 7.0
        data[0, 0, 0] = a
        data[0, 1, 0] = b
        out = bilinear_sample(data, np.array([[1.0, 0.5]]), stride=1)
        assert out[0, 0] == pytest.approx((a + b) / 2)

    def test_linear_along_axis(self):
        data = np.zeros((1, 3, 1), dtype=np.float32)
        data[0, :, 0] = [0.0, 10.0, 20.0]
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            out = bilinear_sample(data, np.array([[0.5 + t, 0.5]]), stride=1)
            assert out[0, 0] == pytest.approx(10.0 * t, abs=1e-5)

    def test_stride_scaling(self):
        data = np.zeros((2, 2, 1), dtype=np.float32)
        data[1, 1, 0] = 8.0
        # cell (1,1) at stride 4 has its center at full-res (6, 6)
        out = bilinear_sample(data, np.array([[6.0, 6.0]]), stride=4)
        assert out[0, 0] == 8.0


class TestBackprojectFeatures:
    def test_visible_voxel_samples_pixel_feature(self, store, spec, cam64):
        pose = Pose.identity()
        maps_c = encode_image(np.random.default_rng(5).random((48, 64)).astype(np.float32), store)
        maps_g = encode_prior(GeometryPrior.empty(48, 64), store)
        # voxel straight ahead: its center projects near the principal point
        keys = keys_to_array([(0, 0, 25)])
        batch = backproject_features(maps_c[2], maps_g[2], cam64, pose, keys, spec)
        assert batch.visible[0]
        center = key_center(spec, 2, (0, 0, 25))
        expected = project(cam64, pose, center)
        assert batch.depths[0] == pytest.approx(expected[1])
        manual = bilinear_sample(maps_c[2].data, np.array([[expected[0].u, expected[0].v]]), 1)
        np.testing.assert_allclose(batch.features[0, :24], manual[0])

    def test_behind_camera_invisible_zero(self, store, spec, cam64):
        maps_c = encode_image(np.ones((48, 64), dtype=np.float32), store)
        maps_g = encode_prior(GeometryPrior.empty(48, 64), store)
        keys = keys_to_array([(0, 0, -10)])
        batch = backproject_features(maps_c[2], maps_g[2], cam64, Pose.identity(), keys, spec)
        assert not batch.visible[0]
        assert np.all(batch.features[0] == 0.0)

    def test_channel_concatenation_width(self, store, spec, cam64):
        maps_c = encode_image(np.ones((48, 64), dtype=np.float32), store)
        maps_g = encode_prior(GeometryPrior.empty(48, 64), store)
        for level in range(3):
            keys = keys_to_array([(0, 0, 8)])
            batch = backproject_features(maps_c[level], maps_g[level], cam64, Pose.identity(), keys, spec)
            assert batch.features.shape[1] == COLOR_CHANNELS[level] + GEO_CHANNELS

    def test_level_mismatch_rejected(self, store, spec, cam64):
        maps_c = encode_image(np.ones((48, 64), dtype=np.float32), store)
        maps_g = encode_prior(GeometryPrior.empty(48, 64), store)
        with pytest.raises(ValueError):
            backproject_features(maps_c[0], maps_g[1], cam64, Pose.identity(),
                                 keys_to_array([(0, 0, 8)]), spec)

    def test_visibility_matches_project(self, store, spec, cam64):
        pose = synth.look_at((1.0, 0.4, 0.6), (0, 0, 0))
        maps_c = encode_image(np.ones((48, 64), dtype=np.float32), store)
        maps_g = encode_prior(GeometryPrior.empty(48, 64), store)
        rng = np.random.default_rng(6)
        keys = keys_to_array([tuple(k) for k in rng.integers(-12, 12, (200, 3)).tolist()])
        batch = backproject_features(maps_c[2], maps_g[2], cam64, pose, keys, spec)
        for i, key in enumerate(batch.keys.tolist()):
            expected = project(cam64, pose, key_center(spec, 2, key))
            assert batch.visible[i] == (expected is not None)


def test_weight_store_round_trip(tmp_path, store):
    path = tmp_path / "weights.sstw"
    save_weights(path, store)
    loaded = load_weights(path)
    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded[name], store[name])
    with open(path, "rb") as f:
        assert f.read(4) == b"SSTW"
