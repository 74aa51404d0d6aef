import numpy as np
import pytest

import fdcheck
from mattekit import ops
from mattekit.basenet import BaseOutputs
from mattekit.losses import (
    compute_loss_gradients,
    compute_losses,
    loss_alpha,
    loss_alpha_grad,
    loss_error,
    loss_error_grad,
    loss_foreground,
    loss_foreground_grad,
    sobel_gradient,
)

SOBEL_H = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)


def sobel_oracle(alpha):
    # nested-loop correlation with replicate padding
    n, _, h, w = alpha.shape
    xp = np.pad(alpha, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros((n, 2, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                win = xp[b, 0, i:i + 3, j:j + 3]
                out[b, 0, i, j] = (win * SOBEL_H).sum()
                out[b, 1, i, j] = (win * SOBEL_H.T).sum()
    return out


class TestSobel:
    def test_constant_is_zero(self):
        g = sobel_gradient(np.full((2, 1, 5, 7), 0.4))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_column_ramp(self):
        s = 0.05
        alpha = np.tile(np.arange(8) * s, (6, 1))[None, None]
        g = sobel_gradient(alpha)
        np.testing.assert_allclose(g[0, 0, 1:-1, 1:-1], 8 * s, atol=1e-12)
        np.testing.assert_allclose(g[0, 1], 0.0, atol=1e-12)

    def test_row_ramp(self):
        s = 0.05
        alpha = np.tile((np.arange(8) * s)[:, None], (1, 6))[None, None]
        g = sobel_gradient(alpha)
        np.testing.assert_allclose(g[0, 1, 1:-1, 1:-1], 8 * s, atol=1e-12)
        np.testing.assert_allclose(g[0, 0], 0.0, atol=1e-12)

    def test_transpose_equivariance(self):
        rng = np.random.default_rng(0)
        alpha = rng.random((1, 1, 5, 5))
        g = sobel_gradient(alpha)
        gt = sobel_gradient(alpha.transpose(0, 1, 3, 2))
        np.testing.assert_allclose(gt[0, 0], g[0, 1].T, atol=1e-12)
        np.testing.assert_allclose(gt[0, 1], g[0, 0].T, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        alpha = rng.random((2, 1, 6, 4))
        np.testing.assert_allclose(sobel_gradient(alpha), sobel_oracle(alpha), atol=1e-12)

    def test_preserves_spatial_size(self):
        assert sobel_gradient(np.zeros((1, 1, 9, 3))).shape == (1, 2, 9, 3)


class TestLossAlpha:
    def test_identity_is_zero(self):
        a = np.random.default_rng(2).random((1, 1, 6, 6))
        assert loss_alpha(a, a.copy()) == 0.0

    def test_uniform_zero_vs_one(self):
        z = np.zeros((2, 1, 5, 5))
        assert loss_alpha(z, np.ones_like(z)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_hand_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = rng.random((1, 1, 4, 4))
        b = rng.random((1, 1, 4, 4))
        got = loss_alpha(a, b)
        want = np.abs(a - b).mean() + np.abs(sobel_oracle(a) - sobel_oracle(b)).mean()
        assert got == pytest.approx(want, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ops.OpShapeError):
            loss_alpha(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5)))

    def test_gradient_fd(self):
        rng = np.random.default_rng(4)
        a = rng.random((2, 1, 4, 6))
        b = rng.random((2, 1, 4, 6))
        _, grad = loss_alpha_grad(a, b)
        num = fdcheck.numeric_grad(lambda _: loss_alpha(a, b), a, eps=1e-7)
        assert fdcheck.rel_err(grad, num) < 1e-4


class TestLossForeground:
    def test_identity_is_zero(self):
        rng = np.random.default_rng(5)
        f = rng.random((1, 3, 4, 4))
        a = rng.random((1, 1, 4, 4))
        assert loss_foreground(f, f.copy(), a) == 0.0

    def test_empty_mask_is_zero(self):
        rng = np.random.default_rng(6)
        f, g = rng.random((1, 3, 4, 4)), rng.random((1, 3, 4, 4))
        loss, grad = loss_foreground_grad(f, g, np.zeros((1, 1, 4, 4)))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_masked_mean_oracle(self):
        rng = np.random.default_rng(7)
        f, g = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        a = (rng.random((2, 1, 4, 4)) > 0.5).astype(float)
        got = loss_foreground(f, g, a)
        mask = np.broadcast_to(a > 0, f.shape)
        want = np.abs(f - g)[mask].sum() / mask.sum()
        assert got == pytest.approx(want, abs=1e-12)

    def test_outside_mask_ignored(self):
        rng = np.random.default_rng(8)
        f = rng.random((1, 3, 4, 4))
        g = f.copy()
        a = np.ones((1, 1, 4, 4))
        a[0, 0, 0, 0] = 0.0
        g[:, :, 0, 0] += 5.0  # huge difference, but outside the mask
        assert loss_foreground(f, g, a) == 0.0

    def test_gradient_fd(self):
        rng = np.random.default_rng(9)
        f, g = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
        a = (rng.random((2, 1, 4, 4)) > 0.3).astype(float)
        _, grad = loss_foreground_grad(f, g, a)
        num = fdcheck.numeric_grad(lambda _: loss_foreground(f, g, a), f, eps=1e-7)
        assert fdcheck.rel_err(grad, num) < 1e-4


class TestLossError:
    def test_perfect_error_map_is_zero(self):
        rng = np.random.default_rng(10)
        a, b = rng.random((1, 1, 5, 5)), rng.random((1, 1, 5, 5))
        assert loss_error(np.abs(a - b), a, b) == 0.0

    def test_mse_oracle(self):
        rng = np.random.default_rng(11)
        e = rng.random((2, 1, 4, 4))
        a, b = rng.random((2, 1, 4, 4)), rng.random((2, 1, 4, 4))
        want = ((e - np.abs(a - b)) ** 2).mean()
        assert loss_error(e, a, b) == pytest.approx(want, abs=1e-12)

    def test_gradient_fd_wrt_prediction(self):
        rng = np.random.default_rng(12)
        e = rng.random((2, 1, 4, 4))
        a, b = rng.random((2, 1, 4, 4)), rng.random((2, 1, 4, 4))
        _, grad = loss_error_grad(e, a, b)
        num = fdcheck.numeric_grad(lambda _: loss_error(e, a, b), e, eps=1e-7)
        assert fdcheck.rel_err(grad, num) < 1e-4


def make_joint_inputs(rng, n=1, full=8, c=4):
    hc, wc = full // c, full // c
    image = 0.3 + 0.3 * rng.random((n, 3, full, full))
    gt_alpha = 0.05 + 0.9 * rng.random((n, 1, full, full))
    gt_fgr = rng.random((n, 3, full, full))
    base = BaseOutputs(
        alpha=rng.random((n, 1, hc, wc)),
        fgr=0.05 + 0.25 * rng.random((n, 3, hc, wc)),
        err=rng.random((n, 1, hc, wc)),
        hid=rng.random((n, 32, hc, wc)),
    )
    refined_alpha = rng.random((n, 1, full, full))
    refined_fgr = 0.05 + 0.25 * rng.random((n, 3, full, full))
    return base, refined_alpha, refined_fgr, image, gt_alpha, gt_fgr


class TestComputeLosses:
    def test_perfect_predictions_zero_total(self):
        rng = np.random.default_rng(13)
        n, full, c = 1, 8, 4
        image = rng.random((n, 3, full, full)) * 0.5 + 0.25
        gt_alpha = rng.random((n, 1, full, full))
        gt_fgr = rng.random((n, 3, full, full)) * 0.5 + 0.25
        alpha_c, _ = ops.resize_forward(gt_alpha, full // c, full // c)
        fgr_star_c, _ = ops.resize_forward(gt_fgr, full // c, full // c)
        image_c, _ = ops.resize_forward(image, full // c, full // c)
        base = BaseOutputs(
            alpha=alpha_c, fgr=fgr_star_c - image_c,
            err=np.zeros_like(alpha_c), hid=np.zeros((n, 32, full // c, full // c)),
        )
        v = compute_losses(base, gt_alpha, gt_fgr - image, image, gt_alpha, gt_fgr,
                           "joint", c)
        assert v.total == 0.0

    def test_base_only_sets_refine_to_zero(self):
        rng = np.random.default_rng(14)
        base, _, _, image, gt_alpha, gt_fgr = make_joint_inputs(rng)
        v = compute_losses(base, None, None, image, gt_alpha, gt_fgr, "base_only", 4)
        assert v.l_refine == 0.0 and v.l_alpha == 0.0 and v.l_fgr == 0.0
        assert v.total == v.l_base

    def test_additivity_against_independent_terms(self):
        rng = np.random.default_rng(15)
        base, ra, rf, image, gt_alpha, gt_fgr = make_joint_inputs(rng, n=2)
        c = 4
        v = compute_losses(base, ra, rf, image, gt_alpha, gt_fgr, "joint", c)
        hc = image.shape[2] // c
        a_c, _ = ops.resize_forward(gt_alpha, hc, hc)
        f_c, _ = ops.resize_forward(gt_fgr, hc, hc)
        i_c, _ = ops.resize_forward(image, hc, hc)
        want_base = (
            loss_alpha(base.alpha, a_c)
            + loss_foreground(np.clip(base.fgr + i_c, 0, 1), f_c, a_c)
            + loss_error(base.err, base.alpha, a_c)
        )
        want_refine = (
            loss_alpha(ra, gt_alpha)
            + loss_foreground(np.clip(rf + image, 0, 1), gt_fgr, gt_alpha)
        )
        assert abs(v.l_base - want_base) < 1e-9
        assert abs(v.l_refine - want_refine) < 1e-9
        assert abs(v.total - (v.l_base + v.l_refine)) < 1e-12
        assert abs(v.l_base - (v.l_alpha_c + v.l_fgr_c + v.l_err)) < 1e-12

    def test_all_terms_nonnegative(self):
        rng = np.random.default_rng(16)
        base, ra, rf, image, gt_alpha, gt_fgr = make_joint_inputs(rng)
        v = compute_losses(base, ra, rf, image, gt_alpha, gt_fgr, "joint", 4)
        for name in ("l_alpha", "l_fgr", "l_err", "l_alpha_c", "l_fgr_c",
                     "l_base", "l_refine", "total"):
            assert getattr(v, name) >= 0.0

    def test_joint_requires_refined(self):
        rng = np.random.default_rng(17)
        base, _, _, image, gt_alpha, gt_fgr = make_joint_inputs(rng)
        with pytest.raises(ValueError):
            compute_losses(base, None, None, image, gt_alpha, gt_fgr, "joint", 4)

    def test_bad_mode(self):
        rng = np.random.default_rng(18)
        base, ra, rf, image, gt_alpha, gt_fgr = make_joint_inputs(rng)
        with pytest.raises(ValueError):
            compute_losses(base, ra, rf, image, gt_alpha, gt_fgr, "both", 4)


class TestLossGradients:
    def test_error_target_is_detached(self):
        # gradient w.r.t. the coarse matte must come from its L1 term alone;
        # the error-loss target contributes exactly nothing
        rng = np.random.default_rng(19)
        base, ra, rf, image, gt_alpha, gt_fgr = make_joint_inputs(rng)
        _, grads = compute_loss_gradients(base, ra, rf, image, gt_alpha, gt_fgr,
                                          "joint", 4)
        hc = image.shape[2] // 4
        a_c, _ = ops.resize_forward(gt_alpha, hc, hc)
        _, want = loss_alpha_grad(base.alpha, a_c)
        np.testing.assert_array_equal(grads.d_alpha_c, want)

    def test_joint_grads_match_fd(self):
        rng = np.random.default_rng(20)
        base, ra, rf, image, gt_alpha, gt_fgr = make_joint_inputs(rng)

        def total(_):
            return compute_losses(base, ra, rf, image, gt_alpha, gt_fgr, "joint", 4).total

        _, grads = compute_loss_gradients(base, ra, rf, image, gt_alpha, gt_fgr,
                                          "joint", 4)
        for target, analytic in (
            (ra, grads.d_alpha),
            (rf, grads.d_fgr),
            (base.fgr, grads.d_fgr_c),
            (base.err, grads.d_err_c),
        ):
            num = fdcheck.numeric_grad(total, target, eps=1e-7)
            assert fdcheck.rel_err(analytic, num) < 1e-4

    def test_base_only_grads_match_fd(self):
        rng = np.random.default_rng(21)
        base, _, _, image, gt_alpha, gt_fgr = make_joint_inputs(rng)

        def total(_):
            return compute_losses(base, None, None, image, gt_alpha, gt_fgr,
                                  "base_only", 4).total

        _, grads = compute_loss_gradients(base, None, None, image, gt_alpha,
                                          gt_fgr, "base_only", 4)
        assert grads.d_alpha is None and grads.d_fgr is None
        for target, analytic in ((base.fgr, grads.d_fgr_c), (base.err, grads.d_err_c)):
            num = fdcheck.numeric_grad(total, target, eps=1e-7)
            assert fdcheck.rel_err(analytic, num) < 1e-4
