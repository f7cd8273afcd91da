import numpy as np
import pytest

from invarco import losses as L
from invarco.errors import InvalidInputError, NumericFailureError


class TestLossWeights:
    def test_defaults(self):
        w = L.LossWeights()
        assert (w.lambda_align, w.lambda_ext, w.lambda_bbox, w.margin) == (1.0, 0.5, 0.5, 0.5)

    def test_negative_rejected(self):
        with pytest.raises(InvalidInputError):
            L.LossWeights(lambda_align=-0.1)
        with pytest.raises(InvalidInputError):
            L.LossWeights(margin=0.0)


class TestLossPos:
    def test_identical_is_zero(self):
        v = np.array([1.0, 2.0])
        assert L.loss_pos([(v, v)]) == 0.0

    def test_unit_distance(self):
        assert L.loss_pos([(np.array([0.0, 0.0]), np.array([1.0, 0.0]))]) == 1.0

    def test_mean_of_two_pairs(self):
        pairs = [
            (np.array([0.0, 0.0]), np.array([1.0, 0.0])),  # d^2 = 1
            (np.zeros(2), np.array([np.sqrt(3.0), 0.0])),  # d^2 = 3
        ]
        assert L.loss_pos(pairs) == pytest.approx(2.0)

    def test_empty(self):
        assert L.loss_pos([]) == 0.0

    def test_symmetry(self):
        a, b = np.array([0.3, -0.7]), np.array([1.1, 0.4])
        assert L.loss_pos([(a, b)]) == L.loss_pos([(b, a)])


class TestLossNeg:
    def test_hinge_inactive_beyond_margin(self):
        a, b = np.zeros(2), np.array([np.sqrt(0.6), 0.0])  # d^2 = 0.6 > 0.5
        assert L.loss_neg([(a, b)], margin=0.5) == 0.0

    def test_identical_gives_margin(self):
        v = np.array([1.0, 2.0])
        assert L.loss_neg([(v, v)], margin=0.5) == 0.5

    def test_partial_hinge(self):
        a, b = np.zeros(2), np.array([np.sqrt(0.2), 0.0])
        assert L.loss_neg([(a, b)], margin=0.5) == pytest.approx(0.3)

    def test_continuous_at_margin(self):
        for eps in (1e-6, 1e-9):
            a, b = np.zeros(1), np.array([np.sqrt(0.5 - eps)])
            assert L.loss_neg([(a, b)], margin=0.5) == pytest.approx(eps, abs=1e-12)

    def test_empty(self):
        assert L.loss_neg([], margin=0.5) == 0.0

    def test_symmetry(self):
        a, b = np.array([0.1, 0.0]), np.array([0.3, 0.1])
        assert L.loss_neg([(a, b)]) == L.loss_neg([(b, a)])

    def test_bad_margin(self):
        with pytest.raises(InvalidInputError):
            L.loss_neg([], margin=0.0)


class TestAlignmentGradients:
    def test_matches_scalar_forms(self):
        rng = np.random.default_rng(0)
        fa = rng.normal(size=(6, 4))
        fb = rng.normal(size=(6, 4))
        positive = np.array([True, True, False, False, True, False])
        l_pos, l_neg, d_fa, d_fb, n_pos, n_neg = L.alignment_losses(fa, fb, positive, 0.5)
        assert l_pos == pytest.approx(
            L.loss_pos([(fa[i], fb[i]) for i in range(6) if positive[i]])
        )
        assert l_neg == pytest.approx(
            L.loss_neg([(fa[i], fb[i]) for i in range(6) if not positive[i]], 0.5)
        )
        assert (n_pos, n_neg) == (3, 3)
        assert np.allclose(d_fb, -d_fa)

    def test_gradients_by_finite_difference(self):
        rng = np.random.default_rng(1)
        fa = 0.1 * rng.normal(size=(4, 3))
        fb = 0.1 * rng.normal(size=(4, 3))
        positive = np.array([True, False, True, False])

        def total(fa_):
            lp, ln, *_ = L.alignment_losses(fa_, fb, positive, 0.5)
            return lp + ln

        _, _, d_fa, _, _, _ = L.alignment_losses(fa, fb, positive, 0.5)
        h = 1e-6
        for i in range(4):
            for j in range(3):
                fp = fa.copy(); fp[i, j] += h
                fm = fa.copy(); fm[i, j] -= h
                fd = (total(fp) - total(fm)) / (2 * h)
                assert d_fa[i, j] == pytest.approx(fd, abs=1e-6)


class TestLossExt:
    def test_exact_match_is_zero(self):
        gk = np.array([[1.0, 2.0]])
        gl = np.array([[0.5, 1.0]])
        target = gk - gl
        val, _, _ = L.loss_ext(gk, gl, target)
        assert val == 0.0

    def test_identity_target_hand_arithmetic(self):
        # head difference zero, target = identity rotation flattened ++ (1,0,0):
        # squared norm = ||I||_F^2 + ||(1,0,0)||^2 = 3 + 1 = 4
        gk = gl = np.zeros((1, 12))
        target = np.concatenate([np.eye(3).reshape(9), [1.0, 0.0, 0.0]])[None, :]
        val, _, _ = L.loss_ext(gk, gl, target)
        assert val == pytest.approx(4.0)

    def test_swap_changes_loss(self):
        rng = np.random.default_rng(2)
        gk = rng.normal(size=(3, 12))
        gl = rng.normal(size=(3, 12))
        target = rng.normal(size=(3, 12))
        v1, _, _ = L.loss_ext(gk, gl, target)
        v2, _, _ = L.loss_ext(gl, gk, target)
        v3, _, _ = L.loss_ext(gl, gk, -target)
        assert v1 != pytest.approx(v2)
        assert v1 == pytest.approx(v3)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        gk = rng.normal(size=(2, 12))
        gl = rng.normal(size=(2, 12))
        target = rng.normal(size=(2, 12))
        val, d_gk, d_gl = L.loss_ext(gk, gl, target)
        h = 1e-6
        gp = gk.copy(); gp[0, 0] += h
        gm = gk.copy(); gm[0, 0] -= h
        fd = (L.loss_ext(gp, gl, target)[0] - L.loss_ext(gm, gl, target)[0]) / (2 * h)
        assert d_gk[0, 0] == pytest.approx(fd, abs=1e-6)
        assert np.allclose(d_gl, -d_gk)


class TestLossBBox:
    def test_perfect_prediction(self):
        t = np.full(8, 0.5)
        assert L.loss_bbox([(t, t, (True, True))]) == 0.0

    def test_single_coordinate_error(self):
        pred = np.full(8, 0.5)
        target = pred.copy()
        target[3] = 0.9
        assert L.loss_bbox([(pred, target, (True, True))]) == pytest.approx(0.4**2 / 8)

    def test_invisible_masked(self):
        pred = np.full(8, 0.5)
        target = np.zeros(8)
        assert L.loss_bbox([(pred, target, (False, False))]) == 0.0

    def test_mask_ignores_masked_targets(self):
        pred = np.full(8, 0.5)
        t1 = np.concatenate([np.full(4, 0.6), np.zeros(4)])
        t2 = np.concatenate([np.full(4, 0.6), np.full(4, 123.0)])
        v = (True, False)
        assert L.loss_bbox([(pred, t1, v)]) == L.loss_bbox([(pred, t2, v)])

    def test_arrays_gradient(self):
        rng = np.random.default_rng(4)
        pred = rng.uniform(0, 1, size=(3, 8))
        target = rng.uniform(0, 1, size=(3, 8))
        mask = rng.random((3, 8)) > 0.3
        val, grad = L.loss_bbox_arrays(pred, target, mask)
        h = 1e-6
        pp = pred.copy(); pp[1, 2] += h
        pm = pred.copy(); pm[1, 2] -= h
        fd = (L.loss_bbox_arrays(pp, target, mask)[0]
              - L.loss_bbox_arrays(pm, target, mask)[0]) / (2 * h)
        assert grad[1, 2] == pytest.approx(fd, abs=1e-6)


class TestLossBC:
    def test_zero_denoiser_near_unit_loss(self, tiny_config):
        from invarco.model import NoiseSchedule, init_params

        params = init_params(0, tiny_config)
        for k in params:
            if k.startswith("den."):
                params[k] = np.zeros_like(params[k])
        schedule = NoiseSchedule.linear(tiny_config.diffusion_steps)
        rng = np.random.default_rng(5)
        items = [(np.zeros(tiny_config.cond_dim), rng.normal(size=(8, 7)) * 0.01)
                 for _ in range(200)]
        val = L.loss_bc(params, tiny_config, schedule, items, np.random.default_rng(6))
        assert val == pytest.approx(1.0, abs=0.1)

    def test_reproducible(self, tiny_config):
        from invarco.model import NoiseSchedule, init_params

        params = init_params(0, tiny_config)
        schedule = NoiseSchedule.linear(tiny_config.diffusion_steps)
        items = [(np.zeros(tiny_config.cond_dim), np.full((8, 7), 0.01))]
        v1 = L.loss_bc(params, tiny_config, schedule, items, np.random.default_rng(7))
        v2 = L.loss_bc(params, tiny_config, schedule, items, np.random.default_rng(7))
        assert v1 == v2


class TestLossTotal:
    def test_all_lambda_zero(self):
        w = L.LossWeights(lambda_align=0, lambda_ext=0, lambda_bbox=0)
        assert L.loss_total(1.25, 9.0, 9.0, 9.0, w) == 1.25

    def test_arithmetic(self):
        w = L.LossWeights(lambda_align=1, lambda_ext=1, lambda_bbox=1)
        assert L.loss_total(1.0, 2.0, 3.0, 4.0, w) == 10.0

    def test_linearity_in_lambda(self):
        base = L.LossWeights(lambda_align=1.0)
        double = L.LossWeights(lambda_align=2.0)
        l1 = L.loss_total(1.0, 0.7, 0.3, 0.2, base)
        l2 = L.loss_total(1.0, 0.7, 0.3, 0.2, double)
        assert abs((l2 - l1) - 0.7) <= 1e-10

    def test_non_finite_rejected(self):
        with pytest.raises(NumericFailureError):
            L.loss_total(float("nan"), 0.0, 0.0, 0.0, L.LossWeights())


class TestLossReport:
    def test_alignment_is_sum(self):
        r = L.LossReport(l_pos=0.25, l_neg=0.125, l_ext=0.5, l_bbox=0.25, l_bc=1.0)
        assert r.l_alignment == 0.25 + 0.125

    def test_total_formula(self):
        w = L.LossWeights(lambda_align=1.0, lambda_ext=0.5, lambda_bbox=0.5)
        r = L.LossReport(l_pos=0.25, l_neg=0.125, l_ext=0.5, l_bbox=0.25, l_bc=1.0, weights=w)
        assert r.l_total == 1.0 + 1.0 * 0.375 + 0.5 * 0.5 + 0.5 * 0.25

    def test_csv_row(self):
        r = L.LossReport(l_pos=1, l_neg=2, l_ext=3, l_bbox=4, l_bc=5)
        row = r.csv_row(7)
        assert row.startswith("7,1,2,3,")
        assert len(row.split(",")) == len(L.LossReport.CSV_HEADER.split(","))
