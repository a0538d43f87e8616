import json

import numpy as np
import pytest

from curvetone import imaging
from curvetone.imaging import (
    DecodeError,
    FloatImage,
    MissingFileError,
    QuantizedImage,
    UnsupportedColorError,
    build_state,
    center_crop,
    downsample,
    load_image,
    load_manifest,
    quantize,
    save_image,
    to_float,
)


class TestPngRoundTrip:
    def test_single_red_pixel_round_trips(self, tmp_path):
        img = QuantizedImage(np.array([[[255]], [[0]], [[0]]], dtype=np.uint8), 8)
        path = tmp_path / "red.png"
        save_image(path, img)
        back = load_image(path)
        assert np.array_equal(back.data, img.data)

    def test_random_rgb_round_trips(self, tmp_path, rng):
        img = QuantizedImage(rng.integers(0, 256, size=(3, 21, 17), dtype=np.uint8), 8)
        path = tmp_path / "rand.png"
        save_image(path, img)
        assert np.array_equal(load_image(path).data, img.data)

    def test_grayscale_promoted_by_replication(self, tmp_path, rng):
        img = QuantizedImage(rng.integers(0, 256, size=(1, 5, 6), dtype=np.uint8), 8)
        path = tmp_path / "gray.png"
        save_image(path, img)
        back = load_image(path)
        assert back.channels == 3
        for c in range(3):
            assert np.array_equal(back.data[c], img.data[0])

    def test_alpha_dropped(self, tmp_path, rng):
        from PIL import Image

        rgba = rng.integers(0, 256, size=(4, 6, 4), dtype=np.uint8)
        Image.fromarray(rgba.transpose(1, 2, 0), mode="RGBA").save(tmp_path / "a.png")
        back = load_image(tmp_path / "a.png")
        assert back.channels == 3
        assert np.array_equal(back.data, rgba[:3])

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_image(tmp_path / "nope.png")

    def test_corrupt_header_is_decode_error(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"\x89PNG\r\n\x1a\n" + b"\x00" * 16)
        with pytest.raises(DecodeError):
            load_image(bad)

    def test_truncated_stream_is_decode_error(self, tmp_path, rng):
        img = QuantizedImage(rng.integers(0, 256, size=(3, 64, 64), dtype=np.uint8), 8)
        path = tmp_path / "t.png"
        save_image(path, img)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(DecodeError):
            load_image(path)

    def test_non_png_is_decode_error(self, tmp_path, rng):
        from PIL import Image

        arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        path = tmp_path / "img.png"  # png suffix, jpeg content
        Image.fromarray(arr).save(path, format="JPEG")
        with pytest.raises(DecodeError):
            load_image(path)

    def test_palette_mode_unsupported(self, tmp_path):
        from PIL import Image

        pal = Image.new("P", (4, 4))
        path = tmp_path / "pal.png"
        pal.save(path)
        with pytest.raises(UnsupportedColorError):
            load_image(path)


class TestConversions:
    def test_full_scale_level(self):
        img = QuantizedImage(np.full((1, 1, 1), 255, dtype=np.uint8), 8)
        f = to_float(img)
        assert f.data[0, 0, 0] == 1.0
        assert quantize(f, 8).data[0, 0, 0] == 255

    def test_zero_level(self):
        img = QuantizedImage(np.zeros((1, 1, 1), dtype=np.uint8), 8)
        f = to_float(img)
        assert f.data[0, 0, 0] == 0.0
        assert quantize(f, 8).data[0, 0, 0] == 0

    def test_half_rounds_away_from_zero(self):
        f = FloatImage(np.full((1, 1, 1), 0.5, dtype=np.float64))
        assert quantize(f, 8).data[0, 0, 0] == 128  # 127.5 rounds up

    def test_quantize_inverts_to_float(self, rng):
        img = QuantizedImage(rng.integers(0, 256, size=(3, 7, 5), dtype=np.uint8), 8)
        assert np.array_equal(quantize(to_float(img), 8).data, img.data)

    def test_idempotent_through_lattice(self, rng):
        f = FloatImage(rng.random((3, 6, 6), dtype=np.float32))
        once = to_float(quantize(f, 8))
        twice = to_float(quantize(once, 8))
        assert np.array_equal(once.data, twice.data)

    def test_out_of_range_values_clamped(self):
        f = FloatImage(np.array([[[-0.2, 1.4]]], dtype=np.float64))
        q = quantize(f, 8)
        assert q.data[0, 0, 0] == 0 and q.data[0, 0, 1] == 255

    def test_higher_depths(self):
        f = FloatImage(np.full((1, 1, 1), 1.0, dtype=np.float64))
        assert quantize(f, 10).data[0, 0, 0] == 1023
        assert quantize(f, 16).data.dtype == np.uint16


class TestDownsample:
    def test_constant_preserved(self):
        img = FloatImage(np.full((3, 12, 10), 0.7, dtype=np.float64))
        out = downsample(img, 5, 4)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_checkerboard_mean(self):
        img = FloatImage(np.array([[[0.0, 1.0], [1.0, 0.0]]]))
        assert downsample(img, 1, 1).data[0, 0, 0] == pytest.approx(0.5)

    def test_global_mean_preserved_when_divisible(self, rng):
        img = FloatImage(rng.random((3, 224, 224)))
        out = downsample(img, 56, 56)
        assert out.data.shape == (3, 56, 56)
        assert out.data.mean() == pytest.approx(img.data.mean(), abs=1e-6)

    def test_non_divisible_sizes(self, rng):
        img = FloatImage(rng.random((1, 13, 11)))
        out = downsample(img, 5, 4)
        assert out.data.shape == (1, 5, 4)
        # area weights sum to 1 per cell, so the overall mean is still close
        assert out.data.mean() == pytest.approx(img.data.mean(), abs=1e-2)

    def test_zero_target_rejected(self, rng):
        with pytest.raises(ValueError):
            downsample(FloatImage(rng.random((1, 4, 4))), 0, 2)

    def test_dtype_preserved(self, rng):
        img = FloatImage(rng.random((1, 8, 8), dtype=np.float32))
        assert downsample(img, 4, 4).data.dtype == np.float32


class TestCenterCrop:
    def test_offsets_floor_half(self):
        img = FloatImage(np.arange(16, dtype=np.float64).reshape(1, 4, 4))
        out = center_crop(img, 2, 2)
        assert np.array_equal(out.data[0], img.data[0, 1:3, 1:3])

    def test_same_size_is_identity(self, rng):
        img = FloatImage(rng.random((3, 5, 5)))
        assert np.array_equal(center_crop(img, 5, 5).data, img.data)

    def test_odd_remainder_offsets_zero(self):
        img = FloatImage(np.arange(9, dtype=np.float64).reshape(1, 3, 3))
        out = center_crop(img, 2, 2)
        assert np.array_equal(out.data[0], img.data[0, 0:2, 0:2])

    def test_small_images_upscaled_first(self, rng):
        img = FloatImage(rng.random((3, 10, 20)))
        out = center_crop(img, 16, 16)
        assert out.data.shape == (3, 16, 16)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestBuildState:
    def test_absent_previous_gives_zero_difference(self, rng):
        x = FloatImage(rng.random((3, 4, 4), dtype=np.float32))
        state = build_state(x)
        assert np.array_equal(state.v.data, np.zeros_like(x.data))

    def test_equal_frames_give_zero_difference(self, rng):
        x = FloatImage(rng.random((3, 4, 4), dtype=np.float32))
        state = build_state(x, x)
        assert np.array_equal(state.v.data, np.zeros_like(x.data))

    def test_constant_difference(self):
        a = FloatImage(np.full((1, 2, 2), 0.8, dtype=np.float64))
        b = FloatImage(np.full((1, 2, 2), 0.5, dtype=np.float64))
        state = build_state(a, b)
        np.testing.assert_allclose(state.v.data, 0.3)

    def test_difference_not_clamped(self):
        a = FloatImage(np.zeros((1, 1, 1)))
        b = FloatImage(np.ones((1, 1, 1)))
        assert build_state(a, b).v.data[0, 0, 0] == -1.0

    def test_shape_mismatch_rejected(self, rng):
        a = FloatImage(rng.random((3, 4, 4)))
        b = FloatImage(rng.random((3, 4, 5)))
        with pytest.raises(ValueError):
            build_state(a, b)

    def test_combined_stacks_x_then_v(self, rng):
        x = FloatImage(rng.random((3, 4, 4), dtype=np.float32))
        prev = FloatImage(rng.random((3, 4, 4), dtype=np.float32))
        state = build_state(x, prev)
        combined = state.combined()
        assert combined.shape == (6, 4, 4)
        assert np.array_equal(combined[:3], x.data)
        assert np.array_equal(combined[3:], x.data - prev.data)

    def test_inputs_not_mutated(self, rng):
        x = FloatImage(rng.random((3, 4, 4)))
        before = x.data.copy()
        build_state(x, x)
        assert np.array_equal(x.data, before)


class TestManifest:
    def test_load_and_resolve_paths(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps([
            {"path": "imgs/a.png", "classes": ["dog", "cat"]},
            {"path": "imgs/b.png", "gt": "imgs/b_gt.png"},
        ]))
        entries = load_manifest(manifest)
        assert entries[0].path == tmp_path / "imgs" / "a.png"
        assert entries[0].classes == ("dog", "cat")
        assert entries[1].classes == ()
        assert entries[1].gt == tmp_path / "imgs" / "b_gt.png"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_manifest(tmp_path / "none.json")

    def test_bad_records_rejected(self, tmp_path):
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps([{"classes": ["x"]}]))
        with pytest.raises(ValueError, match="record 0"):
            load_manifest(manifest)
        manifest.write_text(json.dumps({"path": "a.png"}))
        with pytest.raises(ValueError, match="array"):
            load_manifest(manifest)
