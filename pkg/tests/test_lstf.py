import numpy as np
import pytest

from monofusion.lstf import (
    AttnParams,
    ViewStack,
    attention_batch,
    cross_modal_attention,
    explicit_weight,
    explicit_weights_batch,
    explicit_weights_for_fragment,
    fuse_fragment,
)
from monofusion.priors import MISSING, GeometryPrior
from monofusion.weights import WeightStore


def make_params(c_in, c_out, seed=0) -> AttnParams:
    return AttnParams.init(c_in, c_out, np.random.default_rng(seed))


def random_stack(rng, n=9, c=24, n_visible=None) -> ViewStack:
    mask = np.zeros(n, dtype=bool)
    if n_visible is None:
        n_visible = rng.integers(1, n + 1)
    mask[rng.choice(n, size=n_visible, replace=False)] = True
    feats = np.where(mask[:, None], rng.normal(size=(n, c)), 0.0).astype(np.float32)
    wex = np.where(mask, rng.uniform(0.1, 1.0, n), 0.0)
    return ViewStack(feats, mask, wex)


def plain_masked_attention(feats, mask, params):
    """Independent reference: textbook single-head attention + masked mean +
    feed-forward, written with explicit loops."""
    import math

    n, c = feats.shape
    q = np.array([params.w_q.astype(np.float64) @ feats[i] for i in range(n)])
    k = np.array([params.w_k.astype(np.float64) @ feats[i] for i in range(n)])
    v = np.array([params.w_v.astype(np.float64) @ feats[i] for i in range(n)])
    out_rows = []
    for i in range(n):
        logits = []
        for j in range(n):
            logits.append(q[i] @ k[j] / math.sqrt(c) if mask[j] else -math.inf)
        m = max(logits)
        w = np.array([math.exp(l - m) for l in logits])
        w = w / w.sum()
        out_rows.append(sum(w[j] * v[j] for j in range(n)))
    visible = [out_rows[i] for i in range(n) if mask[i]]
    pre = sum(visible) / len(visible)
    # feed-forward uses row-vector convention (x @ W), hence the transposes
    h = params.ff_w1.astype(np.float64).T @ pre + params.ff_b1
    h = np.where(h >= 0, h, 0.01 * h)
    return params.ff_w2.astype(np.float64).T @ h + params.ff_b2


class TestExplicitWeight:
    def setup_method(self):
        self.sd = np.full((8, 8), MISSING, dtype=np.float32)
        self.err = np.full((8, 8), MISSING, dtype=np.float32)
        self.sd[4, 5] = 2.0
        self.err[4, 5] = 0.0

    def test_missing_depth_returns_one(self):
        assert explicit_weight(self.sd, self.err, (1.2, 1.7), 1.5) == 1.0

    def test_zero_gap_returns_one(self):
        assert explicit_weight(self.sd, self.err, (5.5, 4.5), 2.0) == 1.0

    def test_one_sigma_gap(self):
        # sigma = 0.04 * (1 + 0/2) = 0.04; gap = sigma -> exp(-0.5)
        w = explicit_weight(self.sd, self.err, (5.5, 4.5), 2.0 - 0.04)
        assert w == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_monotone_decreasing_in_gap(self):
        gaps = [0.02, 0.05, 0.1, 0.3]
        ws = [explicit_weight(self.sd, self.err, (5.5, 4.5), 2.0 - g) for g in gaps]
        assert all(a > b for a, b in zip(ws, ws[1:]))

    def test_larger_error_flattens_weight(self):
        # fixed nonzero gap; more reprojection error -> wider sigma -> weight closer to 1
        self.err[4, 5] = 0.0
        w_low = explicit_weight(self.sd, self.err, (5.5, 4.5), 1.9)
        self.err[4, 5] = 4.0
        w_high = explicit_weight(self.sd, self.err, (5.5, 4.5), 1.9)
        assert w_high > w_low

    def test_nearest_pixel_lookup(self):
        # (5.9, 4.1) falls in pixel (5, 4) which carries the depth
        assert explicit_weight(self.sd, self.err, (5.9, 4.1), 2.0) == 1.0
        # (6.1, 4.1) falls in pixel (6, 4): missing -> 1 regardless of depth
        assert explicit_weight(self.sd, self.err, (6.1, 4.1), 0.123) == 1.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        uv = rng.uniform(0, 8, size=(64, 2))
        depths = rng.uniform(0.5, 3.0, size=64)
        vis = rng.random(64) < 0.8
        batch = explicit_weights_batch(self.sd, self.err, uv, depths, vis)
        for i in range(64):
            if vis[i]:
                assert batch[i] == pytest.approx(
                    explicit_weight(self.sd, self.err, uv[i], depths[i]), abs=1e-12
                )
            else:
                assert batch[i] == 0.0


class TestAttention:
    def test_single_view_degenerate_softmax(self):
        c, c_out = 16, 8
        params = make_params(c, c_out, seed=1)
        rng = np.random.default_rng(2)
        f = rng.normal(size=(1, c)).astype(np.float32)
        stack = ViewStack(f, np.array([True]), np.array([1.0]))
        fused = cross_modal_attention(stack, params)
        # softmax over one logit is 1, so pre-FF is exactly W_v f
        pre = params.w_v.astype(np.float64) @ f[0]
        h = params.ff_w1.astype(np.float64).T @ pre + params.ff_b1
        h = np.where(h >= 0, h, 0.01 * h)
        expected = params.ff_w2.astype(np.float64).T @ h + params.ff_b2
        np.testing.assert_allclose(fused, expected, atol=1e-6)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        params = make_params(24, 24, seed=3)
        for _ in range(20):
            stack = random_stack(rng)
            _, internals = cross_modal_attention(stack, params, return_internals=True)
            sums = internals["softmax"].sum(axis=1)
            np.testing.assert_allclose(sums[stack.mask], 1.0, atol=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        params = make_params(24, 24, seed=4)
        stack = random_stack(rng)
        fused = cross_modal_attention(stack, params)
        perm = rng.permutation(len(stack.mask))
        permuted = ViewStack(stack.features[perm], stack.mask[perm], stack.wex[perm])
        fused_p = cross_modal_attention(permuted, params)
        np.testing.assert_allclose(fused, fused_p, atol=1e-6)

    def test_uniform_wex_scales_pre_ff_linearly(self):
        rng = np.random.default_rng(5)
        params = make_params(24, 24, seed=5)
        stack = random_stack(rng)
        ones = ViewStack(stack.features, stack.mask, stack.mask.astype(np.float64))
        _, base = cross_modal_attention(ones, params, return_internals=True)
        for c in (0.25, 0.5, 2.0):
            scaled = ViewStack(stack.features, stack.mask, stack.mask * c)
            _, got = cross_modal_attention(scaled, params, return_internals=True)
            np.testing.assert_allclose(got["pre_ff"], c * base["pre_ff"], atol=1e-6)

    def test_wex_one_equals_plain_attention(self):
        rng = np.random.default_rng(6)
        params = make_params(12, 10, seed=6)
        for _ in range(10):
            stack = random_stack(rng, n=7, c=12)
            ones = ViewStack(stack.features, stack.mask, stack.mask.astype(np.float64))
            fused = cross_modal_attention(ones, params)
            reference = plain_masked_attention(stack.features.astype(np.float64), stack.mask, params)
            np.testing.assert_allclose(fused, reference, atol=1e-6)

    def test_all_invisible_rejected(self):
        params = make_params(8, 8)
        stack = ViewStack(np.zeros((3, 8), dtype=np.float32), np.zeros(3, bool), np.zeros(3))
        with pytest.raises(ValueError):
            cross_modal_attention(stack, params)

    def test_identical_views_match_single_view(self):
        # softmax over identical logits is uniform; mean of identical rows is the row
        rng = np.random.default_rng(7)
        params = make_params(16, 8, seed=7)
        f = rng.normal(size=16).astype(np.float32)
        n = 9
        stack = ViewStack(np.tile(f, (n, 1)), np.ones(n, bool), np.ones(n))
        single = ViewStack(f[None], np.ones(1, bool), np.ones(1))
        np.testing.assert_allclose(
            cross_modal_attention(stack, params),
            cross_modal_attention(single, params),
            atol=1e-5,
        )

    def test_averaging_mode_is_mean_before_ff(self):
        rng = np.random.default_rng(8)
        params = make_params(16, 8, seed=8)
        stack = random_stack(rng, n=5, c=16)
        _, internals = cross_modal_attention(stack, params, mode="mean", return_internals=True)
        expected = stack.features[stack.mask].astype(np.float64).mean(axis=0)
        np.testing.assert_allclose(internals["pre_ff"], expected, atol=1e-7)


class TestFuseFragment:
    def test_invisible_keys_dropped(self):
        params = make_params(8, 8)
        rng = np.random.default_rng(9)
        visible = random_stack(rng, n=4, c=8)
        blind = ViewStack(np.zeros((4, 8), dtype=np.float32), np.zeros(4, bool), np.zeros(4))
        vol = fuse_fragment({(0, 0, 0): visible, (1, 0, 0): blind}, params, level=1)
        assert (0, 0, 0) in vol
        assert (1, 0, 0) not in vol
        assert vol.level == 1

    def test_empty_fragment_rejected(self):
        with pytest.raises(ValueError):
            fuse_fragment({}, make_params(8, 8))

    def test_matches_batched_path(self):
        rng = np.random.default_rng(10)
        params = make_params(12, 6, seed=10)
        stacks = {(i, 0, 0): random_stack(rng, n=5, c=12) for i in range(6)}
        vol = fuse_fragment(stacks, params)
        for key, stack in stacks.items():
            np.testing.assert_array_equal(vol.entries[key], cross_modal_attention(stack, params))


def test_explicit_weights_for_fragment(spec, cam64):
    from monofusion import synth

    rng = np.random.default_rng(11)
    poses = [synth.look_at((1.0, 0.2 * t, 0.5), (0, 0, 0)) for t in range(3)]
    cameras = [(cam64, p) for p in poses]
    priors = []
    for _ in range(3):
        sd = np.full((48, 64), MISSING, dtype=np.float32)
        err = np.full((48, 64), MISSING, dtype=np.float32)
        sd[20:30, 28:40] = 1.1
        err[20:30, 28:40] = 0.4
        priors.append(GeometryPrior(sd, err, err.copy()))
    keys = [(0, 0, 0), (1, 1, 1), (-2, 0, 1)]
    keys_arr, weights, vis = explicit_weights_for_fragment(keys, priors, cameras, spec, level=2)
    assert weights.shape == (3, 3)
    assert ((weights > 0) == vis).all()  # invisible pairs are exactly the zeros
    assert (weights <= 1.0).all()


def test_attn_params_store_round_trip():
    params = make_params(16, 8, seed=12)
    store = WeightStore()
    params.add_to_store(store, "lstf.l9")
    loaded = AttnParams.from_store(store, "lstf.l9")
    np.testing.assert_array_equal(loaded.w_q, params.w_q)
    np.testing.assert_array_equal(loaded.ff_w2, params.ff_w2)
