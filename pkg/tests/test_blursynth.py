import json
import math

import numpy as np
import pytest

from irblurdet.blursynth import (
    BlurLevel,
    SceneSpec,
    SynthConfig,
    apply_blur,
    build_dataset,
    classify_blur_level,
    generate_sample,
    load_png,
    make_linear_kernel,
    quantize,
    save_png,
    synth_scene,
)
from irblurdet.errors import InvalidParameterError
from irblurdet.metrics import psnr


def brute_force_blur(image, kernel):
    """Direct sliding-window convolution with reflect padding."""
    pad = kernel.size // 2
    padded = np.pad(image.astype(np.float64), pad, mode="reflect")
    flipped = kernel.weights[::-1, ::-1]
    out = np.zeros_like(image, dtype=np.float64)
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            out[i, j] = (padded[i : i + kernel.size, j : j + kernel.size] * flipped).sum()
    return out


class TestMakeLinearKernel:
    def test_horizontal_length5_exact_weights(self):
        k = make_linear_kernel(5, 0.0)
        assert k.size == 5
        expected = np.zeros((5, 5))
        expected[2, :] = 0.2
        np.testing.assert_allclose(k.weights, expected, atol=1e-12)

    def test_vertical_is_transpose_of_horizontal(self):
        kh = make_linear_kernel(7, 0.0)
        kv = make_linear_kernel(7, math.pi / 2)
        np.testing.assert_allclose(kv.weights, kh.weights.T, atol=1e-12)

    def test_length1_is_delta(self):
        k = make_linear_kernel(1, 1.234)
        assert k.size == 1
        assert k.weights[0, 0] == 1.0

    @pytest.mark.parametrize("length", [2, 3, 4, 5, 8, 11, 15])
    @pytest.mark.parametrize("angle", [0.0, 0.3, math.pi / 4, 1.3, math.pi / 2, 2.9])
    def test_invariants(self, length, angle):
        k = make_linear_kernel(length, angle)
        assert k.size % 2 == 1
        assert k.size >= length
        assert abs(k.weights.sum() - 1.0) <= 1e-6
        assert (k.weights >= 0).all()
        np.testing.assert_allclose(k.weights, k.weights[::-1, ::-1], atol=1e-12)

    def test_angle_wraps_modulo_pi(self):
        a = make_linear_kernel(6, 0.4)
        b = make_linear_kernel(6, 0.4 + math.pi)
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-12)

    def test_bad_length_rejected(self):
        with pytest.raises(InvalidParameterError):
            make_linear_kernel(0, 0.0)
        with pytest.raises(InvalidParameterError):
            make_linear_kernel(2.5, 0.0)

    def test_bad_angle_rejected(self):
        with pytest.raises(InvalidParameterError):
            make_linear_kernel(5, float("nan"))
        with pytest.raises(InvalidParameterError):
            make_linear_kernel(5, float("inf"))


class TestApplyBlur:
    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(3)
        image = rng.random((17, 23))
        for length, angle in [(3, 0.0), (5, 0.7), (8, 2.1)]:
            k = make_linear_kernel(length, angle)
            np.testing.assert_allclose(apply_blur(image, k), brute_force_blur(image, k), atol=1e-6)

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(4)
        image = rng.random((12, 12))
        k = make_linear_kernel(1, 0.0)
        np.testing.assert_array_equal(apply_blur(image, k), image)

    def test_linearity_exact_for_power_of_two_scale(self):
        rng = np.random.default_rng(5)
        image = rng.random((16, 16))
        k = make_linear_kernel(5, 1.0)
        np.testing.assert_array_equal(apply_blur(image * 2.0, k), apply_blur(image, k) * 2.0)

    def test_constant_image_preserved(self):
        image = np.full((20, 20), 0.37)
        k = make_linear_kernel(7, 0.9)
        np.testing.assert_allclose(apply_blur(image, k), image, atol=1e-10)

    def test_rejects_non_2d(self):
        k = make_linear_kernel(3, 0.0)
        with pytest.raises(InvalidParameterError):
            apply_blur(np.zeros(10), k)

    def test_rejects_kernel_larger_than_image(self):
        k = make_linear_kernel(11, 0.0)
        with pytest.raises(InvalidParameterError):
            apply_blur(np.zeros((5, 5)), k)


class TestBlurLevels:
    @pytest.mark.parametrize(
        "value,expected",
        [
            (10.0, BlurLevel.SEVERE),
            (19.999, BlurLevel.SEVERE),
            (20.0, BlurLevel.MODERATE),
            (22.499, BlurLevel.MODERATE),
            (22.5, BlurLevel.MILD),
            (31.999, BlurLevel.MILD),
        ],
    )
    def test_band_edges(self, value, expected):
        assert classify_blur_level(value) is expected

    @pytest.mark.parametrize("value", [9.999, 32.0, 50.0, -3.0])
    def test_out_of_range_is_none(self, value):
        assert classify_blur_level(value) is None

    def test_nan_rejected(self):
        with pytest.raises(InvalidParameterError):
            classify_blur_level(float("nan"))

    def test_from_label_roundtrip(self):
        for level in BlurLevel:
            assert BlurLevel.from_label(level.label) is level
        with pytest.raises(InvalidParameterError):
            BlurLevel.from_label("Extreme")


class TestSceneSynthesis:
    def test_boxes_inside_image_and_values_bounded(self):
        spec = SceneSpec()
        rng = np.random.default_rng(0)
        for _ in range(5):
            image, boxes = synth_scene(spec, rng)
            assert image.shape == (spec.height, spec.width)
            assert image.min() >= 0.0 and image.max() <= 1.0
            assert len(boxes) == spec.n_targets
            for x, y, w, h in boxes:
                assert 0 <= x and x + w <= spec.width
                assert 0 <= y and y + h <= spec.height
                assert w >= 1 and h >= 1

    def test_quantize_matches_png_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        image, _ = synth_scene(SceneSpec(), rng)
        path = tmp_path / "img.png"
        save_png(image, path)
        np.testing.assert_allclose(load_png(path), quantize(image), atol=1e-7)


class TestGeneration:
    def test_sample_is_pure_function_of_config_and_index(self):
        config = SynthConfig(seed=5)
        sid_a, sharp_a, blurred_a, boxes_a, meta_a = generate_sample(config, "train", 3, 3)
        sid_b, sharp_b, blurred_b, boxes_b, meta_b = generate_sample(config, "train", 3, 3)
        assert sid_a == sid_b
        np.testing.assert_array_equal(sharp_a, sharp_b)
        np.testing.assert_array_equal(blurred_a, blurred_b)
        assert boxes_a == boxes_b
        assert meta_a == meta_b

    def test_achieved_psnr_matches_recorded_band(self):
        config = SynthConfig(seed=9)
        for gi in range(6):
            _, sharp, blurred, _, meta = generate_sample(config, "train", gi, gi)
            recomputed = psnr(sharp, blurred)
            assert abs(recomputed - meta["psnr"]) < 1e-9
            assert classify_blur_level(meta["psnr"]).label == meta["level"]

    def test_blur_length_within_configured_range(self):
        config = SynthConfig(seed=2, blur_length=(3, 11))
        for gi in range(8):
            _, _, _, _, meta = generate_sample(config, "train", gi, gi)
            assert 3 <= meta["length"] <= 11

    def test_build_dataset_deterministic(self, tmp_path):
        config = SynthConfig(counts={"train": 3, "val": 1, "test": 1}, seed=7)
        m1 = build_dataset(config, tmp_path / "a")
        m2 = build_dataset(config, tmp_path / "b")
        assert m1.read_text() == m2.read_text()

    def test_build_dataset_layout(self, tmp_path):
        config = SynthConfig(counts={"train": 3, "val": 1, "test": 2}, seed=1)
        manifest = build_dataset(config, tmp_path / "d")
        records = [json.loads(line) for line in manifest.read_text().splitlines()]
        assert len(records) == 6
        assert sum(r["split"] == "train" for r in records) == 3
        assert sum(r["split"] == "test" for r in records) == 2
        for rec in records:
            assert (tmp_path / "d" / rec["sharp_path"]).exists()
            assert (tmp_path / "d" / rec["blurred_path"]).exists()
            assert rec["blur"]["level"] in {"Severe", "Moderate", "Mild"}
            lo, hi = BlurLevel.from_label(rec["blur"]["level"]).psnr_band
            assert lo <= rec["blur"]["psnr"] < hi
