"""Linear-model gradient dynamics: init, gradients, conservation laws."""

import numpy as np
import pytest

from specgeo.dynamics import (
    DivergenceError,
    ToyConfig,
    check_conservation,
    check_growth_law,
    exact_xent_value,
    gd_step,
    init_balanced,
    linearized_loss_value,
    phase_summary,
    primacy_selection_probe,
    run_trajectory,
    softmax_alpha,
    a_matrix,
)

from oracles import softmax_mp


SHORT = ToyConfig(steps=400)


class TestInitBalanced:
    def test_balance_exact(self):
        for seed in range(5):
            state = init_balanced(ToyConfig(seed=seed))
            f = state.features()
            lhs = f.T @ f
            assert state.balance_residual <= 1e-12 * max(np.linalg.norm(lhs), 1e-30)

    def test_orthonormal_rows(self):
        state = init_balanced(ToyConfig(seed=3))
        gram = state.inputs @ state.inputs.T
        assert np.linalg.norm(gram - np.eye(gram.shape[0])) < 1e-10

    def test_deterministic(self):
        a = init_balanced(ToyConfig(seed=11))
        b = init_balanced(ToyConfig(seed=11))
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.inputs, b.inputs)

    def test_zero_theta_degenerate(self):
        state = init_balanced(ToyConfig(seed=0), scale=0.0)
        assert state.degenerate
        assert np.all(state.w == 0.0)
        assert state.balance_residual == 0.0

    def test_batch_too_large(self):
        with pytest.raises(ValueError, match="orthonormal"):
            ToyConfig(d_in=4, class_counts=(4, 2, 1, 1))

    def test_labels_match_counts(self):
        state = init_balanced(ToyConfig(seed=0))
        assert np.bincount(state.labels, minlength=4).tolist() == [4, 2, 1, 1]


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_alpha(np.zeros((1, 4)))
        np.testing.assert_allclose(out, 0.25, atol=1e-15)

    def test_saturated_row(self):
        row = np.array([[0.0, 1000.0, 0.0, 0.0]])
        out = softmax_alpha(row)
        np.testing.assert_allclose(out[0], [0, 1, 0, 0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = softmax_alpha(rng.normal(size=(6, 5)) * 30)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_high_precision(self):
        rng = np.random.default_rng(1)
        row = rng.normal(size=7) * 3
        ours = softmax_alpha(row[None, :])[0]
        ref = softmax_mp(row)
        np.testing.assert_allclose(ours, ref, atol=1e-14)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            softmax_alpha(np.array([[np.inf, 0.0]]))


class TestAMatrix:
    def test_uniform_alpha(self):
        alpha = np.full((1, 4), 0.25)
        a = a_matrix(alpha, np.array([2]))
        np.testing.assert_allclose(a, [[0.25, 0.25, -0.75, 0.25]])

    def test_perfect_prediction(self):
        alpha = np.array([[0.0, 1.0, 0.0]])
        a = a_matrix(alpha, np.array([1]))
        np.testing.assert_allclose(a, 0.0, atol=1e-15)

    def test_rows_sum_to_zero(self):
        rng = np.random.default_rng(2)
        alpha = softmax_alpha(rng.normal(size=(8, 6)))
        labels = rng.integers(0, 6, size=8)
        a = a_matrix(alpha, labels)
        np.testing.assert_allclose(a.sum(axis=1), 0.0, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            a_matrix(np.full((1, 3), 1 / 3), np.array([3]))

    def test_matches_finite_difference_gradient(self):
        # A is the gradient of summed cross-entropy w.r.t. the logits
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(4, 6))
        labels = rng.integers(0, 6, size=4)
        a = a_matrix(softmax_alpha(logits), labels)
        h = 1e-6
        for i in range(4):
            for j in range(6):
                up = logits.copy()
                up[i, j] += h
                down = logits.copy()
                down[i, j] -= h
                fd = (exact_xent_value(up, labels)
                      - exact_xent_value(down, labels)) / (2 * h)
                assert a[i, j] == pytest.approx(fd, abs=1e-6)


class TestGdStep:
    def test_stationary_when_error_zero(self):
        # mse loss with logits equal to targets: A = 0 exactly
        cfg = ToyConfig(d_in=8, d=4, vocab=4, class_counts=(2, 2, 2, 2),
                        loss_kind="mse", steps=5)
        state = init_balanced(cfg)
        # force a perfect fit: overwrite W so logits equal onehot labels
        f = state.features()
        y = np.zeros((8, 4))
        y[np.arange(8), state.labels] = 1.0
        state.w = np.linalg.lstsq(f, y, rcond=None)[0]
        if np.linalg.norm(f @ state.w - y) < 1e-9:
            after = gd_step(state, cfg)
            np.testing.assert_allclose(after.theta, state.theta, atol=1e-12)

    def test_zero_lr_is_identity_up_to_roundoff(self):
        cfg = ToyConfig(lr=1e-300, steps=1)
        state = init_balanced(cfg)
        after = gd_step(state, cfg)
        np.testing.assert_allclose(after.theta, state.theta, atol=1e-15)
        np.testing.assert_allclose(after.w, state.w, atol=1e-15)

    def test_matches_hand_rolled_oracle(self):
        cfg = ToyConfig(d_in=4, d=2, vocab=2, class_counts=(3, 1), seed=5,
                        steps=1)
        state = init_balanced(cfg)
        f = state.inputs @ state.theta
        logits = f @ state.w
        # hand-rolled softmax and update with explicit loops
        b, v = logits.shape
        alpha = np.empty_like(logits)
        for i in range(b):
            m = max(logits[i])
            exps = [np.exp(z - m) for z in logits[i]]
            s = sum(exps)
            alpha[i] = [e / s for e in exps]
        a = alpha.copy()
        for i, lab in enumerate(state.labels):
            a[i, lab] -= 1.0
        theta_expected = state.theta - cfg.lr * state.inputs.T @ (a @ state.w.T)
        w_expected = state.w - cfg.lr * f.T @ a
        after = gd_step(state, cfg)
        np.testing.assert_allclose(after.theta, theta_expected, atol=1e-12)
        np.testing.assert_allclose(after.w, w_expected, atol=1e-12)

    def test_divergence_detected(self):
        cfg = ToyConfig(lr=1e150, steps=2, loss_kind="mse")
        state = init_balanced(cfg)
        state.theta = state.theta * 1e150
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(DivergenceError):
                gd_step(gd_step(state, cfg), cfg)


class TestLegendreTangency:
    def test_linearized_equals_exact_at_expansion(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            logits = rng.normal(size=(5, 7)) * rng.uniform(0.1, 5)
            labels = rng.integers(0, 7, size=5)
            lin = linearized_loss_value(logits, labels)
            exact = exact_xent_value(logits, labels)
            assert lin == pytest.approx(exact, abs=1e-12 * max(1.0, abs(exact)))


class TestRunTrajectory:
    def test_deterministic(self):
        a = run_trajectory(SHORT)
        b = run_trajectory(SHORT)
        np.testing.assert_array_equal(a.rankme, b.rankme)
        np.testing.assert_array_equal(a.sigma_f, b.sigma_f)
        np.testing.assert_array_equal(a.loss, b.loss)

    def test_loss_decreases(self):
        traj = run_trajectory(SHORT)
        assert traj.loss[-1] < traj.loss[0]

    def test_record_every(self):
        traj = run_trajectory(ToyConfig(steps=100, record_every=10))
        assert traj.steps.tolist() == list(range(0, 101, 10))

    def test_finite_records(self):
        traj = run_trajectory(SHORT)
        for arr in (traj.loss, traj.rankme, traj.sigma_f, traj.align_err,
                    traj.conserve_err, traj.a_norm):
            assert np.all(np.isfinite(arr))

    def test_mse_and_linearized_kinds_run(self):
        for kind in ("mse", "xent_linearized"):
            traj = run_trajectory(ToyConfig(steps=200, loss_kind=kind))
            assert len(traj) == 201


class TestConservation:
    def test_step0_residual(self):
        traj = run_trajectory(SHORT)
        report = check_conservation(traj)
        assert report["residual_step0"] <= 1e-12
        assert report["alignment_error_step0"] <= 1e-10

    def test_drift_shrinks_linearly_in_lr_at_fixed_horizon(self):
        # Euler drift per unit flow-time is O(eta): halving eta with twice
        # the steps should roughly halve the final drift
        t_full = run_trajectory(ToyConfig(steps=800, lr=1e-2))
        t_half = run_trajectory(ToyConfig(steps=1600, lr=5e-3))
        ratio = t_full.conserve_err[-1] / t_half.conserve_err[-1]
        assert 1.4 < ratio < 2.8

    def test_per_step_drift_growth_quarters_when_lr_halves(self):
        # early drift growth rate scales as eta^2
        t_full = run_trajectory(ToyConfig(steps=10, lr=1e-2))
        t_half = run_trajectory(ToyConfig(steps=10, lr=5e-3))
        ratio = t_full.conserve_err[-1] / t_half.conserve_err[-1]
        assert 3.0 < ratio < 5.0

    def test_alignment_error_scales_linearly_with_lr(self):
        a = run_trajectory(ToyConfig(steps=500, lr=1e-2)).align_err.max()
        b = run_trajectory(ToyConfig(steps=1000, lr=5e-3)).align_err.max()
        assert 1.4 < a / b < 2.8

    def test_degenerate_sigmas_use_subspace_projectors(self):
        from specgeo.dynamics import _alignment_error

        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.normal(size=(4, 2)))
        theta = np.pi / 5
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        v1t = q.T
        u2 = q @ rot  # same 2-D subspace, rotated basis
        err, grouped = _alignment_error(v1t, u2, np.array([1.0, 0.3]))
        assert not grouped and err > 0.5  # distinct sigmas: vectors compared
        err, grouped = _alignment_error(v1t, u2, np.array([1.0, 1.0 - 1e-9]))
        assert grouped and err < 1e-10  # degenerate: subspace is what counts


class TestGrowthLaw:
    def test_growth_law_on_short_run(self):
        traj = run_trajectory(ToyConfig(steps=1500))
        report = check_growth_law(traj)
        assert report["f_side"]["max"] <= 0.05
        assert report["w_side"]["max"] <= 0.05
        assert report["rate_identity"]["max"] <= 0.05

    def test_g_bounded_by_dominant_class_count(self):
        # |g_i| <= sigma_max(A); at uniform prediction the dominant class
        # sets the scale of A's top singular value
        for counts, d_in in (((4, 2, 1, 1), 8), ((12, 2, 1, 1), 16)):
            traj = run_trajectory(ToyConfig(d_in=d_in, class_counts=counts,
                                            steps=2))
            n_dom = max(counts)
            assert check_growth_law(traj)["g_abs_max_step0"] <= n_dom

    def test_g_scaling_across_skews(self):
        small = run_trajectory(ToyConfig(d_in=8, class_counts=(4, 2, 1, 1),
                                         steps=2))
        big = run_trajectory(ToyConfig(d_in=24, class_counts=(20, 2, 1, 1),
                                       steps=2))
        g_small = check_growth_law(small)["g_abs_max_step0"]
        g_big = check_growth_law(big)["g_abs_max_step0"]
        # growth of the coupling is bounded by the dominant-count ratio
        assert g_big / g_small <= 20 / 4 + 1e-9

    def test_zero_sigma_skipped(self):
        traj = run_trajectory(ToyConfig(steps=50))
        report = check_growth_law(traj, sigma_floor_rel=0.99)
        assert report["skipped_small_sigma"] > 0


class TestPrimacyProbe:
    def test_two_class_skew_crossing_order(self):
        cfg = ToyConfig(d_in=10, d=2, vocab=2, class_counts=(9, 1),
                        steps=2500, seed=0)
        probe = primacy_selection_probe(run_trajectory(cfg))
        cross = probe["margin_crossing_step"]
        assert cross[0] is not None and cross[1] is not None
        assert cross[0] < cross[1]  # frequent class strictly earlier

    def test_default_config_frequency_order(self):
        traj = run_trajectory(ToyConfig(steps=2500))
        probe = primacy_selection_probe(traj, margin_threshold=0.5)
        assert probe["frequent_classes_cross_first"]

    def test_uniform_spread_reported(self):
        cfg = ToyConfig(class_counts=(2, 2, 2, 2), steps=2500)
        probe = primacy_selection_probe(run_trajectory(cfg),
                                        margin_threshold=0.5)
        assert probe["crossing_spread"] is not None
        assert probe["crossing_spread"] >= 0

    def test_selection_positive_late_default_seed(self):
        traj = run_trajectory(ToyConfig(steps=30_000, record_every=10))
        probe = primacy_selection_probe(traj)
        assert probe["selection_correlation"] > 0


class TestPhaseSummary:
    def test_detects_synthetic_hump(self):
        t = np.linspace(0, 1, 400)
        series = 1.0 + np.sin(np.pi * t)  # rise then fall
        summary = phase_summary(series)
        assert summary.has_interior_maximum
        assert 150 < summary.peak_index < 250

    def test_monotone_series_has_no_interior_max(self):
        series = np.linspace(1.0, 2.0, 300)
        summary = phase_summary(series)
        assert not summary.has_interior_maximum
        assert summary.post_warmup_drawdown <= 1e-12

    def test_collapse_then_rise(self):
        t = np.linspace(0, 1, 500)
        series = np.where(t < 0.2, 2.0 - 5 * t, 1.0 + (t - 0.2))
        summary = phase_summary(series)
        assert not summary.has_interior_maximum
        assert summary.warmup_end > 0
