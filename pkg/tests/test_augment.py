"""Tests for sample augmentation, shadows, and background perturbation."""

import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from mattekit import augment
from mattekit.augment import (
    AugmentConfig,
    augment_sample,
    perturb_background_arrays,
    perturb_background_for_test,
    shadow_augment,
    zip_epoch,
)
from mattekit.image import Image
from mattekit.ops import OpShapeError


def disk_alpha(h, w, radius, cy=None, cx=None):
    cy = h / 2.0 if cy is None else cy
    cx = w / 2.0 if cx is None else cx
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2).astype(np.float64)


def make_inputs(rng, h=32, w=32):
    fg = rng.random((3, h, w))
    alpha = disk_alpha(h, w, min(h, w) // 3) * rng.random((h, w))
    bg = rng.random((3, h, w))
    return fg, alpha, bg


class TestAugmentConfig:
    def test_defaults_valid(self):
        cfg = AugmentConfig()
        assert cfg.crop_range == (128, 256)

    def test_identity_is_noop_config(self):
        cfg = AugmentConfig.identity()
        assert cfg.scale == (1.0, 1.0)
        assert cfg.misalign_prob == 0.0
        assert not cfg.blur and not cfg.sharpen

    def test_reversed_range_rejected(self):
        with pytest.raises(ValueError, match="lo > hi"):
            AugmentConfig(scale=(1.0, 0.3))
        with pytest.raises(ValueError, match="lo > hi"):
            AugmentConfig(crop_range=(256, 128))

    def test_bad_probability_rejected(self):
        with pytest.raises(ValueError, match="probability"):
            AugmentConfig(misalign_prob=1.5)
        with pytest.raises(ValueError, match="probability"):
            AugmentConfig(shadow_prob=-0.1)

    def test_bad_crop_multiple_rejected(self):
        with pytest.raises(ValueError, match="crop_multiple"):
            AugmentConfig(crop_multiple=0)

    def test_to_dict_roundtrip(self):
        cfg = AugmentConfig(rotation=2.0, crop_range=(64, 64))
        d = cfg.to_dict()
        rebuilt = AugmentConfig(
            **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        )
        assert rebuilt == cfg


class TestZipEpoch:
    def test_equal_lengths_identity(self):
        assert zip_epoch(4, 4) == [(0, 0), (1, 1), (2, 2), (3, 3)]

    def test_three_samples_seven_backgrounds(self):
        assert zip_epoch(3, 7) == [
            (0, 0), (1, 1), (2, 2), (0, 3), (1, 4), (2, 5), (0, 6),
        ]

    def test_sixty_samples_hundred_backgrounds(self):
        pairs = zip_epoch(60, 100)
        assert len(pairs) == 100
        assert pairs[:60] == [(i, i) for i in range(60)]
        assert pairs[60] == (0, 60)
        assert pairs[99] == (39, 99)
        assert {s for s, _ in pairs} == set(range(60))
        assert [b for _, b in pairs] == list(range(100))

    def test_more_samples_than_backgrounds(self):
        pairs = zip_epoch(5, 2)
        assert len(pairs) == 5
        assert pairs == [(0, 0), (1, 1), (2, 0), (3, 1), (4, 0)]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            zip_epoch(0, 4)


class TestColorPrimitives:
    def test_hue_rotate_zero_turns_identity(self):
        rng = np.random.default_rng(0)
        x = rng.random((3, 8, 8))
        assert_allclose(augment._hue_rotate(x, 0.0), x, atol=1e-12)

    def test_hue_rotate_full_turn_identity(self):
        rng = np.random.default_rng(1)
        x = rng.random((3, 8, 8))
        assert_allclose(augment._hue_rotate(x, 1.0), x, atol=1e-10)

    def test_hue_rotate_preserves_gray(self):
        x = np.full((3, 6, 6), 0.42)
        assert_allclose(augment._hue_rotate(x, 0.3), x, atol=1e-10)

    def test_jitter_degenerate_ranges_is_clip(self):
        rng = np.random.default_rng(2)
        x = rng.random((3, 8, 8))
        out = augment._color_jitter(x, rng, (1, 1), (1, 1), (1, 1), 0.0)
        assert_array_equal(out, np.clip(x, 0.0, 1.0))

    def test_brightness_scales(self):
        rng = np.random.default_rng(3)
        x = rng.random((3, 8, 8)) * 0.4
        out = augment._color_jitter(x, rng, (2, 2), (1, 1), (1, 1), 0.0)
        assert_allclose(out, np.clip(2.0 * x, 0.0, 1.0))

    def test_contrast_leaves_constant_image(self):
        x = np.full((3, 6, 6), 0.6)
        rng = np.random.default_rng(4)
        out = augment._color_jitter(x, rng, (1, 1), (0.5, 0.5), (1, 1), 0.0)
        assert_allclose(out, x, atol=1e-12)

    def test_zero_saturation_is_grayscale(self):
        rng = np.random.default_rng(5)
        x = rng.random((3, 10, 10)) * 0.5 + 0.25
        out = augment._color_jitter(x, rng, (1, 1), (1, 1), (0, 0), 0.0)
        assert_allclose(out[0], out[1], atol=1e-12)
        assert_allclose(out[1], out[2], atol=1e-12)
        luma = np.tensordot(augment._RGB_TO_YIQ[0], x, axes=1)
        assert_allclose(out[0], luma, atol=1e-12)


class TestAugmentSample:
    def test_identity_config_composites_exactly(self):
        rng = np.random.default_rng(10)
        fg, alpha, bg = make_inputs(rng, 32, 32)
        cfg = AugmentConfig.identity(crop_range=(32, 32))
        s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(0))
        expected = alpha[None] * fg + (1.0 - alpha[None]) * bg
        assert_array_equal(s.image, expected)
        assert_array_equal(s.bgr, bg)
        assert_array_equal(s.gt_alpha[0], alpha)
        assert_array_equal(s.gt_fgr, fg)
        assert not s.misaligned and not s.shadowed
        assert_array_equal(s.image_clean, s.image)
        assert_array_equal(s.bg_clean, s.bgr)

    def test_fixed_seed_bit_identical(self):
        rng = np.random.default_rng(11)
        fg, alpha, bg = make_inputs(rng, 160, 180)
        cfg = AugmentConfig(crop_range=(64, 128))
        a = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(7))
        b = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(7))
        for field in ("image", "bgr", "gt_alpha", "gt_fgr", "bg_clean",
                      "image_clean"):
            assert_array_equal(getattr(a, field), getattr(b, field))
        assert (a.misaligned, a.shadowed) == (b.misaligned, b.shadowed)
        c = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(8))
        assert not np.array_equal(a.image, c.image)

    def test_compositing_self_consistency(self):
        rng = np.random.default_rng(12)
        fg, alpha, bg = make_inputs(rng, 200, 200)
        cfg = AugmentConfig(crop_range=(64, 160))
        for seed in range(20):
            s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(seed))
            recomposed = s.gt_alpha * s.gt_fgr + (1.0 - s.gt_alpha) * s.bg_clean
            assert_allclose(s.image_clean, recomposed, atol=1e-6)
            if not s.shadowed:
                assert_array_equal(s.image, s.image_clean)

    def test_outputs_in_unit_range(self):
        rng = np.random.default_rng(13)
        fg, alpha, bg = make_inputs(rng, 180, 200)
        cfg = AugmentConfig(crop_range=(64, 128), misalign_prob=0.5,
                            shadow_prob=0.5)
        for seed in range(12):
            s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(seed))
            for arr in (s.image, s.bgr, s.gt_alpha, s.gt_fgr):
                assert arr.min() >= 0.0 and arr.max() <= 1.0

    def test_crop_shape_within_range(self):
        rng = np.random.default_rng(14)
        fg, alpha, bg = make_inputs(rng, 200, 220)
        cfg = AugmentConfig(crop_range=(64, 128))
        for seed in range(8):
            s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(seed))
            h, w = s.image.shape[-2:]
            assert 64 <= h <= 128 and 64 <= w <= 128
            assert s.gt_alpha.shape == (1, h, w)
            assert s.bgr.shape == (3, h, w)

    def test_foreground_and_alpha_share_transform(self):
        # identical source planes must land on identical warped planes
        alpha = disk_alpha(48, 48, 12)
        fg = np.stack([alpha, alpha, alpha])
        bg = np.full((3, 48, 48), 0.5)
        cfg = AugmentConfig.identity(crop_range=(40, 40))
        cfg = dataclasses.replace(cfg, rotation=20.0, translation=0.1,
                                  scale=(0.6, 1.0), shear=5.0)
        for seed in range(6):
            s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(seed))
            assert_array_equal(s.gt_fgr[0], s.gt_alpha[0])

    def test_misalignment_spares_compositing_background(self):
        rng = np.random.default_rng(15)
        fg, alpha, bg = make_inputs(rng, 40, 40)
        cfg = AugmentConfig.identity(crop_range=(32, 32))
        cfg = dataclasses.replace(cfg, misalign_prob=1.0,
                                  misalign_rotation=1.0,
                                  misalign_translation=0.01,
                                  misalign_color=(0.82, 1.18),
                                  misalign_hue=0.1)
        s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(3))
        assert s.misaligned
        assert not np.array_equal(s.bgr, s.bg_clean)
        recomposed = s.gt_alpha * s.gt_fgr + (1.0 - s.gt_alpha) * s.bg_clean
        assert_array_equal(s.image, recomposed)

    def test_shadow_only_darkens(self):
        rng = np.random.default_rng(16)
        fg, alpha, bg = make_inputs(rng, 40, 40)
        cfg = AugmentConfig.identity(crop_range=(40, 40))
        cfg = dataclasses.replace(cfg, shadow_prob=1.0)
        s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(2))
        assert s.shadowed
        assert np.all(s.image <= s.image_clean + 1e-12)

    def test_crop_falls_back_when_source_small(self):
        rng = np.random.default_rng(17)
        fg, alpha, bg = make_inputs(rng, 20, 20)
        cfg = AugmentConfig.identity(crop_range=(64, 128))
        s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(0))
        assert s.image.shape == (3, 20, 20)

    def test_crop_multiple_snaps_dimensions(self):
        rng = np.random.default_rng(18)
        fg, alpha, bg = make_inputs(rng, 70, 70)
        cfg = AugmentConfig.identity(crop_range=(30, 60), crop_multiple=16)
        for seed in range(6):
            s = augment_sample(fg, alpha, bg, cfg, np.random.default_rng(seed))
            h, w = s.image.shape[-2:]
            assert h % 16 == 0 and w % 16 == 0

    def test_shape_validation(self):
        rng = np.random.default_rng(19)
        fg, alpha, bg = make_inputs(rng, 32, 32)
        cfg = AugmentConfig.identity(crop_range=(16, 16))
        with pytest.raises(OpShapeError):
            augment_sample(fg[:2], alpha, bg, cfg, np.random.default_rng(0))
        with pytest.raises(OpShapeError):
            augment_sample(fg, alpha[:16], bg, cfg, np.random.default_rng(0))

    def test_misalignment_rate_matches_bernoulli(self):
        # 10k draws; binomial std is ~0.46%, the 1.5% window is ~3.3 sigma
        rng = np.random.default_rng(20)
        fg, alpha, bg = make_inputs(rng, 8, 8)
        cfg = AugmentConfig.identity(crop_range=(4, 4))
        cfg = dataclasses.replace(cfg, misalign_prob=0.3)
        draw = np.random.default_rng(123)
        hits = sum(
            augment_sample(fg, alpha, bg, cfg, draw).misaligned
            for _ in range(10_000)
        )
        assert abs(hits / 10_000 - 0.3) <= 0.015


class TestShadowAugment:
    def test_zero_alpha_leaves_image(self):
        rng = np.random.default_rng(30)
        image = rng.random((3, 24, 24))
        out = shadow_augment(image, np.zeros((24, 24)), np.random.default_rng(0))
        assert_array_equal(out, np.clip(image, 0.0, 1.0))

    def test_zero_strength_leaves_image(self):
        rng = np.random.default_rng(31)
        image = rng.random((3, 24, 24))
        alpha = disk_alpha(24, 24, 8)
        out = shadow_augment(image, alpha, np.random.default_rng(0), strength=0.0)
        assert_array_equal(out, np.clip(image, 0.0, 1.0))

    def test_darkens_only_outside_subject(self):
        image = np.full((3, 64, 64), 0.8)
        alpha = disk_alpha(64, 64, 20)
        out = shadow_augment(image, alpha, np.random.default_rng(4))
        assert np.all(out <= image + 1e-12)
        covered = alpha >= 0.5
        assert np.max(np.abs(out[:, covered] - image[:, covered])) == 0.0
        assert out.min() < 0.8  # the shadow actually lands somewhere

    def test_shape_mismatch_rejected(self):
        with pytest.raises(OpShapeError):
            shadow_augment(np.zeros((3, 8, 8)), np.zeros((8, 10)),
                           np.random.default_rng(0))


class TestPerturbBackground:
    def test_zeroed_ranges_identity(self):
        rng = np.random.default_rng(40)
        b = rng.random((3, 16, 16))
        out = perturb_background_arrays(
            b, np.random.default_rng(1), shift=0.0, gamma=(1.0, 1.0),
            noise_mu=0.0, noise_var=(0.0, 0.0),
        )
        assert_array_equal(out, b)

    def test_subpixel_shift_moves_ramp(self):
        # replay the generator to recover the drawn offsets, then check the
        # interior of a linear ramp moved by exactly that amount
        step = 0.01
        b = np.tile(np.arange(64) * step, (3, 64, 1))
        replay = np.random.default_rng(5)
        replay.uniform(-0.3, 0.3)  # row shift, invisible on a column ramp
        dx = replay.uniform(-0.3, 0.3)
        out = perturb_background_arrays(
            b, np.random.default_rng(5), shift=0.3, gamma=(1.0, 1.0),
            noise_mu=0.0, noise_var=(0.0, 0.0),
        )
        assert abs(dx) > 1e-3
        interior = out[:, 8:-8, 8:-8]
        expected = b[:, 8:-8, 8:-8] - dx * step
        assert_allclose(interior, expected, atol=1e-12)

    def test_gamma_applied(self):
        rng = np.random.default_rng(41)
        b = rng.random((3, 16, 16)) * 0.8 + 0.1
        replay = np.random.default_rng(6)
        replay.uniform(-0.0, 0.0)
        replay.uniform(-0.0, 0.0)
        g = replay.uniform(0.85, 1.15)
        out = perturb_background_arrays(
            b, np.random.default_rng(6), shift=0.0, gamma=(0.85, 1.15),
            noise_mu=0.0, noise_var=(0.0, 0.0),
        )
        assert_allclose(out, b**g, atol=1e-12)

    def test_noise_moments_on_constant_image(self):
        b = np.full((3, 200, 200), 0.5)
        out = perturb_background_arrays(
            b, np.random.default_rng(7), shift=0.0, gamma=(1.0, 1.0),
            noise_mu=0.02, noise_var=(0.12, 0.12),
        )
        delta = out - b
        assert abs(abs(delta.mean()) - 0.02) < 0.005
        assert 0.12 * 0.9 <= delta.var() <= 0.12 * 1.1

    def test_noise_variance_within_default_window(self):
        b = np.full((3, 200, 200), 0.5)
        out = perturb_background_arrays(
            b, np.random.default_rng(8), shift=0.0, gamma=(1.0, 1.0),
        )
        v = (out - b).var()
        assert 0.08 * 0.9 <= v <= 0.15 * 1.1

    def test_image_wrapper_clips_and_preserves_shape(self):
        rng = np.random.default_rng(42)
        img = Image(rng.random((3, 32, 32)))
        out = perturb_background_for_test(img, np.random.default_rng(9))
        assert isinstance(out, Image)
        assert out.data.shape == (3, 32, 32)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_image_wrapper_zeroed_ranges_identity(self):
        rng = np.random.default_rng(43)
        img = Image(rng.random((3, 16, 16)))
        out = perturb_background_for_test(
            img, np.random.default_rng(2), shift=0.0, gamma=(1.0, 1.0),
            noise_mu=0.0, noise_var=(0.0, 0.0),
        )
        assert_array_equal(out.data, img.data)
