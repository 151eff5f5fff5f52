from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_mask_instance, max_rel_error, numeric_grad
from volmask.jobs import job_rng
from volmask.masker import (
    MaskDivergenceError,
    MaskError,
    MaskOptConfig,
    apply_mask,
    beta_grid,
    grid_search_masks,
    lambda_grid,
    loss_outlier_flags,
    mask_gradient,
    mask_loss,
    optimize_group_mask,
    optimize_session_mask,
    quality_check_stage1,
    sparsity_gradient,
    sparsity_term,
    target_probability,
    threshold_mask,
    tv_gradient,
    tv_term,
)
from volmask.network import ArchitectureSpec, build_network, forward
from volmask.trainer import EarlyStopPolicy

unit_masks = arrays(np.float64, (3, 3, 3), elements=st.floats(0.0, 1.0))


def tiny_net(seed=0, dtype=np.float64):
    spec = ArchitectureSpec.from_pattern(1, (4, 4, 4), first_filters=2, dropout_rate=0.0)
    return build_network(spec, np.random.default_rng(seed), dtype)


def quick_cfg(**kw):
    base = dict(learning_rate=10.0, lambda1=1e-6, lambda2=1e-5, stop=EarlyStopPolicy(5, 8, "relative", 0.05))
    base.update(kw)
    return MaskOptConfig(**base)


class TestApplyMask:
    def test_ones_is_identity(self):
        X = np.random.default_rng(0).random((4, 4, 4))
        assert np.array_equal(apply_mask(X, np.ones_like(X)), X)

    def test_zeros_gives_mu(self):
        X = np.random.default_rng(0).random((4, 4, 4))
        assert np.array_equal(apply_mask(X, np.zeros_like(X), 1.0), np.ones_like(X))

    def test_arithmetic(self):
        assert apply_mask(np.array([0.4]), np.array([0.5]), 1.0)[0] == pytest.approx(0.7)

    def test_broadcast_over_batch(self):
        X = np.random.default_rng(1).random((3, 2, 2, 2))
        m = np.full((2, 2, 2), 0.25)
        assert apply_mask(X, m).shape == X.shape

    def test_shape_mismatch(self):
        with pytest.raises(MaskError):
            apply_mask(np.zeros((4, 4, 4)), np.ones((4, 4, 3)))

    @given(unit_masks, arrays(np.float64, (3, 3, 3), elements=st.floats(0.0, 1.0)), st.floats(0.0, 1.0))
    def test_output_between_image_and_mu(self, m, X, mu):
        out = apply_mask(X, m, mu)
        lo, hi = np.minimum(X, mu), np.maximum(X, mu)
        assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


class TestRegularizers:
    def test_sparsity_examples(self):
        assert sparsity_term(np.ones((2, 2, 2)), 0.1) == 0.0
        assert sparsity_term(np.array([1.0, 1.0, 0.5]), 1.0) == pytest.approx(0.5)
        assert sparsity_term(np.full(8, 0.9), 0.1) == pytest.approx(8 * 0.1**0.1, rel=1e-12)
        assert sparsity_term(np.full(8, 0.9), 0.1) == pytest.approx(6.3546, abs=1e-4)

    def test_tv_examples(self):
        assert tv_term(np.full((3, 3, 3), 0.3), 1.0) == 0.0
        assert tv_term(np.array([0.0, 0.0, 1.0, 1.0]), 1.0) == 1.0
        assert tv_term(np.array([0.0, 0.5, 1.0]), 2.0) == pytest.approx(0.5)

    def test_tv_counts_every_axis(self):
        m = np.ones((3, 3, 3))
        m[1, 1, 1] = 0.0
        # six unit differences around one interior voxel
        assert tv_term(m, 1.0) == 6.0

    def test_tv_gradient_of_constant_is_zero(self):
        assert not tv_gradient(np.full((4, 4, 4), 0.7), 1.0).any()

    def test_sparsity_gradient_at_one_is_zero(self):
        assert not sparsity_gradient(np.ones((2, 2, 2)), 0.1).any()

    def test_sparsity_gradient_floor(self):
        # |1 - m| below epsilon uses epsilon, so the derivative stays finite
        g = sparsity_gradient(np.array([1.0 - 1e-12]), 0.1, epsilon=1e-6)
        assert g[0] == pytest.approx(-0.1 * 1e-6 ** (0.1 - 1.0))

    @pytest.mark.parametrize("beta", [0.5, 1.0, 2.0, 3.0])
    def test_gradients_match_differences(self, beta):
        rng = np.random.default_rng(int(beta * 10))
        m = rng.permutation(np.linspace(0.1, 0.9, 64)).reshape(4, 4, 4)
        # a small step keeps the truncation error of |d|^0.5 near d = 0.013 negligible
        num = numeric_grad(lambda v: sparsity_term(v, beta), m.copy(), h=1e-6)
        assert max_rel_error(sparsity_gradient(m, beta), num) < 1e-6
        # the permutation keeps every difference at least 0.0127 away from zero
        num = numeric_grad(lambda v: tv_term(v, beta), m.copy(), h=1e-6)
        assert max_rel_error(tv_gradient(m, beta), num) < 1e-6


class TestLoss:
    def test_ones_mask_is_plain_probability(self):
        net = tiny_net()
        X = np.random.default_rng(2).random((3, 4, 4, 4))
        cfg = MaskOptConfig()
        p = forward(net, X[:, None])[:, 1]
        assert mask_loss(net, X, np.ones((4, 4, 4)), cfg) == float(np.mean(p))

    def test_zero_weights_pure_classifier(self):
        net = tiny_net()
        X = np.random.default_rng(3).random((2, 4, 4, 4))
        m = np.random.default_rng(4).random((4, 4, 4))
        cfg = MaskOptConfig(lambda1=0.0, lambda2=0.0)
        assert mask_loss(net, X, m, cfg) == float(np.mean(target_probability(net, X, m, cfg)))

    def test_independent_evaluation(self):
        net = tiny_net(seed=5)
        rng = np.random.default_rng(5)
        X = rng.random((2, 4, 4, 4))
        m = rng.random((4, 4, 4))
        cfg = MaskOptConfig(lambda1=0.3, lambda2=0.2, beta1=0.5, beta2=2.0, mu=0.8)
        blended = m * X + (1 - m) * 0.8
        p = forward(net, blended[:, None])[:, 1].mean()
        sparsity = sum(abs(1 - v) ** 0.5 for v in m.ravel())
        tv = 0.0
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    if i < 3:
                        tv += (m[i + 1, j, k] - m[i, j, k]) ** 2
                    if j < 3:
                        tv += (m[i, j + 1, k] - m[i, j, k]) ** 2
                    if k < 3:
                        tv += (m[i, j, k + 1] - m[i, j, k]) ** 2
        assert mask_loss(net, X, m, cfg) == pytest.approx(0.3 * sparsity + 0.2 * tv + p, rel=1e-12)

    def test_scale_multiplies_regularizers(self):
        net = tiny_net()
        X = np.random.default_rng(6).random((1, 4, 4, 4))
        m = np.random.default_rng(7).random((4, 4, 4))
        cfg = MaskOptConfig(lambda1=0.01, lambda2=0.02)
        p = float(target_probability(net, X, m, cfg)[0])
        reg = mask_loss(net, X, m, cfg) - p
        assert mask_loss(net, X, m, cfg, scale=100.0) - p == pytest.approx(100 * reg, rel=1e-9)

    def test_gradient_zero_when_image_is_mu(self):
        net = tiny_net()
        X = np.ones((2, 4, 4, 4))
        _, g = mask_gradient(net, X, np.random.default_rng(8).random((4, 4, 4)), MaskOptConfig(lambda1=0, lambda2=0))
        assert not g.any()

    def test_gradient_loss_matches_mask_loss(self):
        net = tiny_net()
        X = np.random.default_rng(9).random((2, 4, 4, 4))
        m = np.random.default_rng(10).uniform(0.2, 0.8, (4, 4, 4))
        cfg = MaskOptConfig(lambda1=0.01, lambda2=0.01)
        loss, _ = mask_gradient(net, X, m, cfg)
        assert loss == pytest.approx(mask_loss(net, X, m, cfg), rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_differences(self, seed):
        assert check_mask_instance(np.random.default_rng(seed)) < 1e-3


class TestThreshold:
    def test_example(self):
        assert threshold_mask(np.array([0.96, 0.95, 0.2])).tolist() == [1.0, 0.95, 0.2]

    def test_ones(self):
        assert np.array_equal(threshold_mask(np.ones((2, 2, 2))), np.ones((2, 2, 2)))

    @given(unit_masks, st.floats(0.0, 1.0))
    def test_idempotent_and_monotone(self, m, cutoff):
        t = threshold_mask(m, cutoff)
        assert np.array_equal(threshold_mask(t, cutoff), t)
        assert np.all(t >= m)


class TestQualityCheck:
    def test_boundaries(self):
        vols = [np.full((2, 2, 2), 0.90), np.full((2, 2, 2), 0.95), np.full((2, 2, 2), 1.0)]
        report = quality_check_stage1(vols, ["a", "b", "c"])
        assert [i for i, _ in report.kept] == ["b", "c"]
        assert [i for i, _, _ in report.rejected] == ["a"]
        assert "0.95" in report.rejected[0][2]

    def test_empty(self):
        report = quality_check_stage1([])
        assert report.kept == [] and report.rejected == []

    def test_default_ids(self):
        report = quality_check_stage1([np.zeros(3)])
        assert report.rejected[0][0] == "0"


class TestOutliers:
    def test_single_outlier(self):
        assert loss_outlier_flags([1, 1, 1, 1, 100]) == [4]

    def test_constant(self):
        assert loss_outlier_flags([0.5] * 6) == []

    def test_tight(self):
        assert loss_outlier_flags([1.00, 1.01, 1.02, 1.03, 1.04]) == []

    def test_too_few(self):
        with pytest.raises(ValueError):
            loss_outlier_flags([1, 2])


class TestGroupMask:
    def test_suppresses_and_stays_in_range(self, tiny_trained):
        net, X, Xv = tiny_trained
        cfg = quick_cfg()
        res = optimize_group_mask(net, X, Xv, cfg, np.random.default_rng(0))
        assert res.mask.min() >= 0.0 and res.mask.max() <= 1.0
        assert res.raw_mask.min() >= 0.0 and res.raw_mask.max() <= 1.0
        assert np.array_equal(res.mask, threshold_mask(res.raw_mask))
        monitored = [r["val_mask_loss"] for r in res.log]
        assert res.best_loss == min(monitored)
        assert res.log[res.best_epoch]["val_mask_loss"] == res.best_loss
        p = target_probability(net, Xv, res.mask, cfg).mean()
        assert p < target_probability(net, Xv, np.ones(X.shape[1:]), cfg).mean()

    def test_deterministic_per_seed(self, tiny_trained):
        net, X, Xv = tiny_trained
        cfg = quick_cfg(stop=EarlyStopPolicy(5, 3, "relative", 0.05))
        a = optimize_group_mask(net, X, Xv, cfg, np.random.default_rng(4))
        b = optimize_group_mask(net, X, Xv, cfg, np.random.default_rng(4))
        assert np.array_equal(a.mask, b.mask) and a.log == b.log

    def test_without_validation(self, tiny_trained):
        net, X, _ = tiny_trained
        res = optimize_group_mask(net, X, None, quick_cfg(stop=EarlyStopPolicy(5, 2, "relative", 0.05)))
        assert all(r["val_mask_loss"] is None for r in res.log)
        assert len(res.image_losses) == len(X)

    def test_divergence(self, tiny_trained):
        net, X, Xv = tiny_trained
        with pytest.raises(MaskDivergenceError):
            optimize_group_mask(net, X, Xv, quick_cfg(lambda1=1.0))

    def test_rejects_wrong_class(self, tiny_trained):
        net, X, _ = tiny_trained
        with pytest.raises(MaskError, match="not predicted"):
            optimize_group_mask(net, X, None, quick_cfg(target_class=0))

    def test_rejects_empty(self, tiny_trained):
        net, X, _ = tiny_trained
        with pytest.raises(MaskError):
            optimize_group_mask(net, X[:0], None, quick_cfg())


class TestSessionMask:
    def test_suppression_and_determinism(self, tiny_trained):
        net, X, _ = tiny_trained
        cfg = quick_cfg(session_multiplier=1.0, session_stop=EarlyStopPolicy(25, 60, "relative", 0.01))
        a = optimize_session_mask(net, X[0], cfg)
        b = optimize_session_mask(net, X[0], cfg)
        assert np.array_equal(a.mask, b.mask)
        assert target_probability(net, X[0], a.mask, cfg)[0] < 0.05

    def test_multiplier_scales_regularization(self, tiny_trained):
        net, X, _ = tiny_trained
        cfg = quick_cfg(session_multiplier=7.0, session_stop=EarlyStopPolicy(5, 1, "relative", 0.01))
        res = optimize_session_mask(net, X[0], cfg)
        assert res.log[0]["train_mask_loss"] == pytest.approx(mask_loss(net, X[0], np.ones(X.shape[1:]), cfg))
        m = res.raw_mask
        assert res.log[1]["train_mask_loss"] == pytest.approx(mask_loss(net, X[0], m, cfg, scale=7.0), rel=1e-9)

    def test_single_image_only(self, tiny_trained):
        net, X, _ = tiny_trained
        with pytest.raises(MaskError):
            optimize_session_mask(net, X[:2], quick_cfg())


class TestGrid:
    def test_grids(self):
        assert len(beta_grid()) == 12 and len(lambda_grid()) == 16
        assert all(c["lambda1"] == 1e-4 and c["lambda2"] == 1e-3 for c in beta_grid())
        assert all(c["beta1"] == 0.1 and c["beta2"] == 1.0 for c in lambda_grid())

    def test_four_cells_four_masks(self, tiny_trained):
        net, X, Xv = tiny_trained
        cells = [{"beta1": b} for b in (0.1, 0.5, 1.0, 2.0)]
        cfg = quick_cfg(stop=EarlyStopPolicy(5, 2, "relative", 0.05))
        results, rows = grid_search_masks(net, X, Xv, cells, cfg, seed=0)
        assert len(results) == len(rows) == 4
        assert [r["beta1"] for r in rows] == [0.1, 0.5, 1.0, 2.0]
        for res, row in zip(results, rows):
            assert row["coverage"] == int(np.count_nonzero(res.mask < 0.95))
            assert row["min_value"] == float(res.mask.min())

    def test_parallel_equals_serial(self, tiny_trained):
        net, X, Xv = tiny_trained
        cells = [{"lambda1": 1e-6}, {"lambda1": 1e-5}]
        cfg = quick_cfg(stop=EarlyStopPolicy(5, 2, "relative", 0.05))
        a = grid_search_masks(net, X, Xv, cells, cfg, seed=1, jobs=1)
        b = grid_search_masks(net, X, Xv, cells, cfg, seed=1, jobs=2)
        assert a[1] == b[1]
        assert all(np.array_equal(r.mask, s.mask) for r, s in zip(a[0], b[0]))

    def test_fallback_rate(self, tiny_trained):
        net, X, Xv = tiny_trained
        cfg = quick_cfg(lambda1=0.0, lambda2=1.0, stop=EarlyStopPolicy(5, 2, "relative", 0.05))
        with pytest.raises(MaskDivergenceError):
            optimize_group_mask(net, X, Xv, cfg)
        _, rows = grid_search_masks(net, X, Xv, [{}], cfg, fallback_learning_rate=1e-6)
        assert rows[0]["learning_rate"] == 1e-6

    def test_empty_grid(self, tiny_trained):
        net, X, Xv = tiny_trained
        with pytest.raises(ValueError):
            grid_search_masks(net, X, Xv, [], quick_cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        MaskOptConfig(lambda1=-1)
    with pytest.raises(ValueError):
        MaskOptConfig(beta2=0)
    with pytest.raises(ValueError):
        MaskOptConfig(mu=1.5)
    with pytest.raises(ValueError):
        replace(MaskOptConfig(), target_class=2)


def test_grid_duplicate_cells_share_result(tiny_trained):
    net, X, Xv = tiny_trained
    cfg = quick_cfg(stop=EarlyStopPolicy(5, 2, "relative", 0.05))
    results, rows = grid_search_masks(net, X, Xv, [{"lambda1": 1e-6}, {}, {"beta1": 0.5}], cfg, seed=2)
    assert results[0] is results[1]
    assert [r["cell"] for r in rows] == [0, 1, 2]
    alone = optimize_group_mask(net, X, Xv, replace(cfg, beta1=0.5), job_rng(2, "grid"))
    assert np.array_equal(alone.mask, results[2].mask)
