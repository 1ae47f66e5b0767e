import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from burstlab import rawmodel as rm
from burstlab.common import DataError, DimensionError, UsageError


def rand_raw(rng, h=8, w=8):
    return rm.RawImage(rng.uniform(0, 1, (h, w)).astype(np.float32))


class TestTypes:
    def test_odd_dims_rejected(self):
        with pytest.raises(DimensionError):
            rm.RawImage(np.zeros((5, 6), np.float32))
        with pytest.raises(DimensionError):
            rm.RawImage(np.zeros((6, 5), np.float32))

    def test_nonfinite_rejected(self):
        data = np.zeros((4, 4), np.float32)
        data[0, 0] = np.nan
        with pytest.raises(DataError):
            rm.RawImage(data)

    def test_negative_noise_params_rejected(self):
        with pytest.raises(UsageError):
            rm.NoiseParams(-1e-3, 0.0)
        with pytest.raises(UsageError):
            rm.NoiseParams(0.0, -1e-6)

    def test_ccm_row_sum_enforced(self):
        bad = np.eye(3)
        bad[0, 0] = 1.1
        with pytest.raises(UsageError):
            rm.CameraPipelineParams(ccm_srgb_to_cam=bad)


class TestPacking:
    def test_explicit_2x2(self):
        raw = rm.RawImage(np.array([[0.1, 0.2], [0.3, 0.4]], np.float32))
        packed = rm.pack_bayer(raw)
        assert packed.data.shape == (1, 1, 4)
        np.testing.assert_array_equal(packed.data[0, 0],
                                      np.array([0.1, 0.2, 0.3, 0.4], np.float32))

    def test_constant_image(self):
        raw = rm.RawImage(np.full((4, 4), 0.5, np.float32))
        assert np.all(rm.pack_bayer(raw).data == 0.5)
        assert rm.pack_bayer(raw).data.shape == (2, 2, 4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_roundtrip_exact(self, hh, hw, seed):
        rng = np.random.default_rng(seed)
        raw = rand_raw(rng, 2 * hh, 2 * hw)
        back = rm.unpack_bayer(rm.pack_bayer(raw))
        np.testing.assert_array_equal(back.data, raw.data)


class TestMosaic:
    def test_rggb_layout_constant(self):
        rgb = rm.LinearRGB(np.tile(np.array([1.0, 0.5, 0.0], np.float32), (2, 2, 1)))
        np.testing.assert_array_equal(rm.mosaic(rgb).data,
                                      [[1.0, 0.5], [0.5, 0.0]])

    def test_identical_planes_passthrough(self):
        rng = np.random.default_rng(0)
        plane = rng.uniform(0, 1, (6, 6)).astype(np.float32)
        rgb = rm.LinearRGB(np.repeat(plane[..., None], 3, axis=2))
        np.testing.assert_array_equal(rm.mosaic(rgb).data, plane)

    def test_red_plane_lands_in_channel0(self):
        rng = np.random.default_rng(1)
        rgb = rm.LinearRGB(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
        packed = rm.pack_bayer(rm.mosaic(rgb))
        np.testing.assert_array_equal(packed.data[..., 0], rgb.data[0::2, 0::2, 0])

    def test_channel_preserved_at_every_pixel(self):
        rng = np.random.default_rng(2)
        rgb = rm.LinearRGB(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
        raw = rm.mosaic(rgb).data
        np.testing.assert_array_equal(raw[0::2, 1::2], rgb.data[0::2, 1::2, 1])
        np.testing.assert_array_equal(raw[1::2, 0::2], rgb.data[1::2, 0::2, 1])
        np.testing.assert_array_equal(raw[1::2, 1::2], rgb.data[1::2, 1::2, 2])


class TestProxy:
    def test_channel_selection(self):
        packed = rm.PackedFrame(np.array([[[0.1, 0.2, 0.3, 0.4]]], np.float32))
        np.testing.assert_array_equal(rm.rgb_proxy(packed).data[0, 0],
                                      np.array([0.1, 0.2, 0.4], np.float32))

    def test_green_choice_when_equal(self):
        rng = np.random.default_rng(3)
        data = rng.uniform(0, 1, (4, 4, 4)).astype(np.float32)
        data[..., 2] = data[..., 1]
        proxy = rm.rgb_proxy(rm.PackedFrame(data))
        np.testing.assert_array_equal(proxy.data[..., 1], data[..., 1])

    def test_shape(self):
        packed = rm.PackedFrame(np.zeros((5, 7, 4), np.float32))
        assert rm.rgb_proxy(packed).data.shape == (5, 7, 3)


class TestNoise:
    def test_zero_noise_identity(self):
        rng = np.random.default_rng(4)
        raw = rand_raw(rng)
        out = rm.apply_noise(raw, rm.NoiseParams(0, 0), rng)
        np.testing.assert_array_equal(out.data, raw.data)

    def test_monte_carlo_variance(self):
        # variance = read + shot * x; 10^6 draws at x = 0.5
        img = rm.LinearRGB(np.full((1000, 1000, 1 * 3), 0.5)[:, :, :3])
        noisy = rm.apply_noise(img, rm.NoiseParams(shot=0.01, read=0.001),
                               np.random.default_rng(5))
        var = float((noisy.data - 0.5).var())
        assert abs(var - 0.006) < 0.006 * 0.02

    def test_variance_tracks_signal_at_three_levels(self):
        p = rm.NoiseParams(shot=0.004, read=0.0005)
        for level in (0.2, 0.5, 0.8):
            img = rm.LinearRGB(np.full((600, 600, 3), level))
            noisy = rm.apply_noise(img, p, np.random.default_rng(6))
            expected = p.read + p.shot * level
            assert abs(float((noisy.data - level).var()) - expected) < expected * 0.03

    def test_deterministic_given_seed(self):
        rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
        raw = rand_raw(np.random.default_rng(8))
        p = rm.NoiseParams(1e-3, 1e-5)
        np.testing.assert_array_equal(rm.apply_noise(raw, p, rng_a).data,
                                      rm.apply_noise(raw, p, rng_b).data)

    def test_output_clipped(self):
        img = rm.LinearRGB(np.full((64, 64, 3), 0.99))
        noisy = rm.apply_noise(img, rm.NoiseParams(0.05, 0.01), np.random.default_rng(9))
        assert noisy.data.max() <= 1.0 and noisy.data.min() >= 0.0


class TestPipeline:
    def test_identity_configuration(self):
        rng = np.random.default_rng(10)
        srgb = rm.LinearRGB(rng.uniform(0, 1, (8, 8, 3)))
        out, _ = rm.unprocess(srgb, rm.CameraPipelineParams.identity())
        np.testing.assert_allclose(out.data, srgb.data, atol=1e-12)

    def test_black_maps_to_black(self):
        srgb = rm.LinearRGB(np.zeros((4, 4, 3)))
        out, _ = rm.unprocess(srgb, rm.random_pipeline_params(np.random.default_rng(11)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_forward_roundtrip(self):
        rng = np.random.default_rng(12)
        srgb = rm.LinearRGB(rng.uniform(0.05, 0.95, (32, 32, 3)))
        params = rm.random_pipeline_params(rng)
        linear, _ = rm.unprocess(srgb, params)
        back = rm.process(linear, params)
        assert np.abs(back.data - srgb.data).max() < 1e-4

    def test_random_params_recorded_rows_sum_one(self):
        params = rm.random_pipeline_params(np.random.default_rng(13))
        np.testing.assert_allclose(params.ccm_srgb_to_cam.sum(axis=1), 1.0, atol=1e-9)
        assert 1.5 <= params.red_gain <= 2.5 and 1.5 <= params.blue_gain <= 2.5

    def test_unprocess_without_params_needs_rng(self):
        srgb = rm.LinearRGB(np.zeros((4, 4, 3)))
        with pytest.raises(UsageError):
            rm.unprocess(srgb)


class TestSerialization:
    def test_raw_roundtrip_with_noise_meta(self, tmp_path):
        rng = np.random.default_rng(14)
        raw = rand_raw(rng, 6, 10)
        rm.save_raw(tmp_path / "frame", raw, rm.NoiseParams(1e-3, 1e-5))
        loaded, noise = rm.load_raw(tmp_path / "frame")
        np.testing.assert_array_equal(loaded.data, raw.data)
        assert noise == rm.NoiseParams(1e-3, 1e-5)
        header = (tmp_path / "frame.hdr").read_text()
        assert "cfa: RGGB" in header

    def test_packed_header_channel_order(self, tmp_path):
        packed = rm.PackedFrame(np.zeros((2, 2, 4), np.float32))
        rm.save_packed(tmp_path / "p", packed)
        assert "R,Gr,Gb,B" in (tmp_path / "p.hdr").read_text()

    def test_rgb_roundtrip(self, tmp_path):
        rng = np.random.default_rng(15)
        rgb = rm.LinearRGB(rng.uniform(0, 1, (4, 6, 3)).astype(np.float32))
        rm.save_rgb(tmp_path / "gt", rgb)
        np.testing.assert_array_equal(rm.load_rgb(tmp_path / "gt").data, rgb.data)
