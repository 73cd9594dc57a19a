import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monofusion.priors import (
    MISSING,
    GeometryPrior,
    confidence_from_error,
    load_sparse_prior,
    make_prior,
    save_sparse_prior,
    simulate_slam_priors,
)


class TestConfidence:
    def test_zero_error_full_confidence(self):
        e = np.array([[0.0]], dtype=np.float32)
        assert confidence_from_error(e, 1.0)[0, 0] == 1.0

    def test_ln2_gives_half(self):
        e = np.array([[np.log(2.0)]])
        assert confidence_from_error(e, 1.0)[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_missing_gives_zero(self):
        e = np.array([[MISSING]], dtype=np.float32)
        assert confidence_from_error(e, 1.0)[0, 0] == 0.0

    def test_matches_exp_formula_exactly(self):
        lams = [0.25, 0.5, 1.0, 2.0, 4.0]
        errs = np.array([0.0, 0.1, 0.5, 1.0, np.log(2.0), 3.0, 10.0])
        for lam in lams:
            got = confidence_from_error(errs[None, :], lam)[0]
            expected = np.exp(-lam * errs)
            np.testing.assert_array_equal(got, expected)

    def test_rejects_nonpositive_lambda(self):
        with pytest.raises(ValueError):
            confidence_from_error(np.zeros((2, 2)), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(0.0, 20.0),
        st.floats(1e-6, 20.0),  # separation large enough to be representable in exp
        st.floats(0.01, 5.0),
    )
    def test_strictly_decreasing_in_error(self, e1, delta, lam):
        c = confidence_from_error(np.array([[e1, e1 + delta]]), lam)[0]
        assert c[0] > c[1]


class TestMakePrior:
    def test_depths_within_cap_unchanged(self):
        sd = np.full((4, 4), MISSING, dtype=np.float32)
        err = np.full((4, 4), MISSING, dtype=np.float32)
        sd[1, 2], err[1, 2] = 2.5, 0.3
        prior = make_prior(sd, err, 1.0)
        assert prior.support.sum() == 1
        assert prior.depth[1, 2] == pytest.approx(2.5)
        assert prior.confidence[1, 2] == pytest.approx(np.exp(-0.3), abs=1e-6)

    def test_deep_point_removed_from_both_channels(self):
        sd = np.full((4, 4), MISSING, dtype=np.float32)
        err = np.full((4, 4), MISSING, dtype=np.float32)
        sd[0, 0], err[0, 0] = 3.5, 0.1
        sd[3, 3], err[3, 3] = 1.0, 0.2
        prior = make_prior(sd, err, 1.0)
        assert prior.depth[0, 0] == MISSING
        assert prior.confidence[0, 0] == 0.0
        assert prior.support.sum() == 1

    def test_empty_prior_is_valid(self):
        sd = np.full((4, 4), MISSING, dtype=np.float32)
        prior = make_prior(sd, sd.copy(), 1.0)
        assert prior.support.sum() == 0

    def test_mismatched_support_rejected(self):
        sd = np.full((4, 4), MISSING, dtype=np.float32)
        err = np.full((4, 4), MISSING, dtype=np.float32)
        sd[1, 1] = 2.0
        with pytest.raises(ValueError):
            make_prior(sd, err, 1.0)

    def test_support_never_grows(self):
        rng = np.random.default_rng(4)
        sd = np.where(rng.random((16, 16)) < 0.3, rng.uniform(0.1, 4.0, (16, 16)), MISSING).astype(np.float32)
        err = np.where(sd >= 0, rng.uniform(0, 2, (16, 16)), MISSING).astype(np.float32)
        prior = make_prior(sd, err, 1.0)
        assert (prior.support & ~(sd >= 0)).sum() == 0

    def test_confidence_in_unit_interval_on_support(self):
        rng = np.random.default_rng(5)
        sd = np.where(rng.random((16, 16)) < 0.4, rng.uniform(0.1, 2.9, (16, 16)), MISSING).astype(np.float32)
        err = np.where(sd >= 0, rng.uniform(0, 5, (16, 16)), MISSING).astype(np.float32)
        prior = make_prior(sd, err, 1.0)
        conf = prior.confidence[prior.support]
        assert (conf > 0).all() and (conf <= 1).all()


class TestSimulate:
    def test_noiseless_matches_gt(self):
        gt = np.full((20, 20), 2.0)
        sd, err = simulate_slam_priors(gt, 50, 0.0, 0.0, seed=1)
        mask = sd >= 0
        assert mask.sum() == 50
        np.testing.assert_array_equal(sd[mask], 2.0)
        np.testing.assert_array_equal(err[mask], 0.0)

    def test_zero_points(self):
        gt = np.full((10, 10), 1.0)
        sd, err = simulate_slam_priors(gt, 0, 0.01, 1.0, seed=1)
        assert (sd >= 0).sum() == 0 and (err >= 0).sum() == 0

    def test_deterministic_for_seed(self):
        gt = np.full((20, 20), 2.0)
        a = simulate_slam_priors(gt, 30, 0.05, 1.5, seed=42)
        b = simulate_slam_priors(gt, 30, 0.05, 1.5, seed=42)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_too_many_points_rejected(self):
        gt = np.full((5, 5), MISSING)
        gt[0, 0] = 1.0
        with pytest.raises(ValueError):
            simulate_slam_priors(gt, 2, 0.0, 0.0, seed=0)

    def test_error_rank_correlates_with_depth_noise(self):
        gt = np.full((64, 64), 2.0)
        sd, err = simulate_slam_priors(gt, 500, 0.05, 2.0, seed=3)
        mask = sd >= 0
        noise = np.abs(sd[mask] - 2.0)
        errors = err[mask]
        from scipy.stats import spearmanr

        rho, _ = spearmanr(noise, errors)
        assert rho > 0.9


def test_prior_file_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    sd = np.full((12, 16), MISSING, dtype=np.float32)
    err = np.full((12, 16), MISSING, dtype=np.float32)
    for _ in range(20):
        v, u = rng.integers(0, 12), rng.integers(0, 16)
        sd[v, u] = rng.uniform(0.1, 3.0)
        err[v, u] = rng.uniform(0.0, 4.0)
    path = tmp_path / "prior.txt"
    save_sparse_prior(path, sd, err)
    sd2, err2 = load_sparse_prior(path)
    assert sd2.shape == (12, 16)
    np.testing.assert_allclose(sd2, sd, atol=1e-6)
    np.testing.assert_allclose(err2, err, atol=1e-6)


def test_empty_prior_constructor():
    prior = GeometryPrior.empty(8, 10)
    assert prior.depth.shape == (8, 10)
    assert prior.support.sum() == 0
    assert (prior.confidence == 0).all()
