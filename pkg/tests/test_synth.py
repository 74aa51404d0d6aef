"""Tests for the synthetic dataset generator."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from mattekit.image import composite, read_image, read_matte
from mattekit.synth import SynthSpec, generate_sample, write_dataset

BLOB_ONLY = (1.0, 0.0, 0.0)
STROKES_ONLY = (0.0, 1.0, 0.0)
POLYGON_ONLY = (0.0, 0.0, 1.0)
FLAT_ONLY = (1.0, 0.0, 0.0, 0.0)


def small_spec(**kw):
    defaults = dict(resolution=(48, 72))
    defaults.update(kw)
    return SynthSpec(**defaults)


class TestSynthSpec:
    def test_defaults_valid(self):
        spec = SynthSpec()
        assert spec.resolution == (160, 256)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            SynthSpec(subject_weights=(1.0, -0.5, 0.0))

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError, match="not all zero"):
            SynthSpec(background_weights=(0.0, 0.0, 0.0, 0.0))

    def test_wrong_weight_count_rejected(self):
        with pytest.raises(ValueError, match="entries"):
            SynthSpec(subject_weights=(1.0, 1.0))

    def test_bad_resolution_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(resolution=(128, 64))

    def test_bad_stroke_range_rejected(self):
        with pytest.raises(ValueError):
            SynthSpec(stroke_width=(2.0, 1.0))


class TestGenerateSample:
    def test_same_seed_bit_identical(self):
        spec = small_spec()
        a = generate_sample(spec, 17)
        b = generate_sample(spec, 17)
        for x, y in zip(a, b):
            assert_array_equal(x.data, y.data)

    def test_different_seeds_differ(self):
        spec = small_spec()
        a = generate_sample(spec, 0)
        b = generate_sample(spec, 1)
        assert not np.array_equal(a[1].data, b[1].data)

    def test_resolution_within_range(self):
        spec = small_spec(resolution=(40, 56))
        for seed in range(10):
            fg, alpha, bg = generate_sample(spec, seed)
            assert 40 <= fg.height <= 56 and 40 <= fg.width <= 56
            assert alpha.data.shape == fg.data.shape[1:]
            assert bg.data.shape == fg.data.shape

    def test_flat_background_constant(self):
        spec = small_spec(background_weights=FLAT_ONLY)
        for seed in range(5):
            _, _, bg = generate_sample(spec, seed)
            assert np.ptp(bg.data.reshape(3, -1), axis=1).max() == 0.0

    def test_checker_background_two_colors(self):
        spec = small_spec(background_weights=(0.0, 0.0, 0.0, 1.0))
        for seed in range(5):
            _, _, bg = generate_sample(spec, seed)
            for c in range(3):
                assert len(np.unique(bg.data[c])) <= 2
            assert not np.ptp(bg.data.reshape(3, -1), axis=1).max() == 0.0

    def test_gradient_background_spans_values(self):
        spec = small_spec(background_weights=(0.0, 1.0, 0.0, 0.0))
        _, _, bg = generate_sample(spec, 3)
        assert np.ptp(bg.data) > 0.05

    @pytest.mark.parametrize("weights", [BLOB_ONLY, STROKES_ONLY, POLYGON_ONLY])
    def test_subjects_have_solid_empty_and_fractional_regions(self, weights):
        spec = small_spec(subject_weights=weights, resolution=(64, 96))
        solid = empty = frac = 0
        for seed in range(8):
            _, alpha, _ = generate_sample(spec, seed)
            a = alpha.data
            solid += (a == 1.0).sum()
            empty += (a == 0.0).sum()
            frac += ((a > 0.0) & (a < 1.0)).sum()
        assert solid > 0 and empty > 0 and frac > 0

    def test_stroke_bundles_fractional_coverage(self):
        # thin strands must leave enough partial-alpha pixels to make
        # patch refinement meaningful: >= 1% averaged over 100 seeds
        spec = small_spec(subject_weights=STROKES_ONLY, resolution=(96, 128))
        fractions = []
        for seed in range(100):
            _, alpha, _ = generate_sample(spec, seed)
            a = alpha.data
            fractions.append(((a > 0.05) & (a < 0.95)).mean())
        assert np.mean(fractions) >= 0.01

    def test_foreground_nonzero_under_subject(self):
        for weights in (BLOB_ONLY, STROKES_ONLY, POLYGON_ONLY):
            spec = small_spec(subject_weights=weights)
            for seed in range(4):
                fg, alpha, _ = generate_sample(spec, seed)
                covered = alpha.data > 0.0
                assert covered.any()
                assert fg.data[:, covered].min() > 0.0

    def test_composite_finite_and_bounded_many_seeds(self):
        spec = small_spec(resolution=(24, 32))
        for seed in range(1000):
            fg, alpha, bg = generate_sample(spec, seed)
            comp = composite(alpha, fg, bg).data
            assert np.isfinite(comp).all()
            assert comp.min() >= 0.0 and comp.max() <= 1.0

    def test_alpha_diversity_across_seeds(self):
        # fixed resolution so mattes are comparable pixelwise
        spec = small_spec(resolution=(48, 48))
        mattes = np.stack(
            [generate_sample(spec, seed)[1].data for seed in range(100)]
        )
        total = 0.0
        pairs = 0
        for i in range(0, 100, 7):  # thinned pairing keeps this cheap
            diffs = np.abs(mattes - mattes[i]).mean(axis=(1, 2))
            total += diffs.sum() - diffs[i]
            pairs += len(mattes) - 1
        assert total / pairs > 0.05


class TestWriteDataset:
    def test_writes_triples_and_manifest(self, tmp_path):
        spec = small_spec(resolution=(24, 32))
        manifest = write_dataset(spec, 3, tmp_path, base_seed=11)
        assert manifest["seeds"] == [11, 12, 13]
        with open(tmp_path / "manifest.json") as fh:
            on_disk = json.load(fh)
        assert on_disk == manifest
        for sub in ("fgr", "pha", "bgr"):
            files = sorted(p.name for p in (tmp_path / sub).iterdir())
            assert files == ["0000.png", "0001.png", "0002.png"]

    def test_roundtrip_close_to_generated(self, tmp_path):
        spec = small_spec(resolution=(24, 24))
        write_dataset(spec, 1, tmp_path, base_seed=5)
        fg, alpha, bg = generate_sample(spec, 5)
        fg_r = read_image(tmp_path / "fgr" / "0000.png")
        alpha_r = read_matte(tmp_path / "pha" / "0000.png")
        bg_r = read_image(tmp_path / "bgr" / "0000.png")
        # 8-bit color and 16-bit matte quantization bounds
        assert np.abs(fg_r.data - fg.data).max() <= 0.5 / 255
        assert np.abs(bg_r.data - bg.data).max() <= 0.5 / 255
        assert np.abs(alpha_r.data - alpha.data).max() <= 0.5 / 65535

    def test_zero_count_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_dataset(small_spec(), 0, tmp_path)
