import numpy as np
import pytest

from burstlab import flow, rawmodel as rm, synth, textures
from burstlab.common import DimensionError


@pytest.fixture(scope="module")
def source():
    rng = np.random.default_rng(99)
    return textures.random_texture(rng, (288, 288))


def zero_noise_cfg(**kw):
    return synth.SynthConfig(zero_noise=True, random_pipeline=True, **kw)


class TestSampleMotion:
    def test_no_shift_regime(self):
        cfg = synth.MotionConfig(no_shift=True)
        m = synth.sample_motion(np.random.default_rng(0), cfg)
        assert m.translation == (0.0, 0.0) and m.rotation == 0.0

    def test_default_ranges_always(self):
        cfg = synth.MotionConfig()
        rng = np.random.default_rng(1)
        for _ in range(500):
            m = synth.sample_motion(rng, cfg)
            assert -24 <= m.translation[0] <= 24 and -24 <= m.translation[1] <= 24
            assert -1 <= m.rotation <= 1

    def test_reproducible(self):
        cfg = synth.MotionConfig()
        a = [synth.sample_motion(np.random.default_rng(2), cfg) for _ in range(5)]
        b = [synth.sample_motion(np.random.default_rng(2), cfg) for _ in range(5)]
        assert a == b


class TestApplyMotion:
    def test_identity_bit_exact(self, source):
        out = synth.apply_motion(source, synth.MotionParams())
        np.testing.assert_array_equal(out.data, source.data)

    def test_integer_translation_exact_shift(self, source):
        m = synth.MotionParams(translation=(3.0, 0.0))
        out = synth.apply_motion(source, m)
        # content moves +3 in x: out(y, x) = src(y, x-3)
        np.testing.assert_allclose(out.data[:, 3:], source.data[:, :-3], atol=1e-12)

    def test_motion_then_inverse_recovers_interior(self):
        # composition identity is a geometry check; smooth content keeps the
        # double-interpolation loss within the 1e-3 budget
        from burstlab.common import gaussian_blur

        rng = np.random.default_rng(21)
        img = rm.LinearRGB(gaussian_blur(rng.uniform(0, 1, (128, 128, 3)), 3.0))
        m = synth.MotionParams(translation=(4.5, -2.25))
        minv = synth.MotionParams(translation=(-4.5, 2.25))
        back = synth.apply_motion(synth.apply_motion(img, m), minv)
        interior = (slice(16, -16), slice(16, -16))
        err = np.abs(back.data[interior] - img.data[interior]).max()
        assert err < 1e-3


class TestDownsample:
    def test_constant(self):
        img = rm.LinearRGB(np.full((8, 8, 3), 0.37))
        np.testing.assert_allclose(synth.downsample(img, 2).data, 0.37, atol=1e-12)

    def test_identity_at_s1(self, source):
        np.testing.assert_array_equal(synth.downsample(source, 1).data, source.data)

    def test_alternating_row_pattern_halves(self):
        row = np.tile(np.array([0.0, 1.0], np.float64), 8)
        img = rm.LinearRGB(np.repeat(np.repeat(row[None, :, None], 16, 0), 3, 2))
        out = synth.downsample(img, 2)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_indivisible_dims_rejected(self):
        img = rm.LinearRGB(np.zeros((10, 10, 3)))
        with pytest.raises(DimensionError):
            synth.downsample(img, 4)


class TestOracleFlow:
    def test_identity_motion_zero_flow(self):
        f = synth.oracle_flow(synth.MotionParams(), 4, (8, 8))
        assert np.abs(f.data).max() == 0.0

    def test_pure_translation_scaling(self):
        # HR translation (8, 0) at s=4 is exactly 1 packed pixel
        m = synth.MotionParams(translation=(8.0, 0.0))
        f = synth.oracle_flow(m, 4, (6, 6), (0, 0), (127.5, 127.5))
        np.testing.assert_allclose(f.data[..., 0], 1.0, atol=1e-9)
        np.testing.assert_allclose(f.data[..., 1], 0.0, atol=1e-9)

    def test_rotation_warp_residual(self, source):
        rng = np.random.default_rng(3)
        cfg = zero_noise_cfg(crop=48)
        cfg.motion.max_translation = 0.0
        sample = synth.generate_burst(source, 4, 4, rng, cfg)
        base = rm.rgb_proxy(rm.pack_bayer(sample.frames[0])).data
        for i in range(1, 4):
            proxy = rm.rgb_proxy(rm.pack_bayer(sample.frames[i]))
            warped = flow.warp_image(proxy, sample.oracle_flows[i]).data
            margin = int(np.ceil(np.abs(sample.oracle_flows[i].data).max())) + 1
            it = (slice(margin, -margin), slice(margin, -margin))
            rmse = np.sqrt(np.mean((warped[it] - base[it]) ** 2))
            assert rmse < 1e-2, f"frame {i}: rotation warp residual {rmse}"


class TestGenerateBurst:
    def test_single_frame_zero_noise_equals_direct_pipeline(self, source):
        rng = np.random.default_rng(4)
        cfg = zero_noise_cfg(crop=32)
        s = synth.generate_burst(source, 1, 4, rng, cfg)
        assert s.burst_size == 1
        assert np.abs(s.oracle_flows[0].data).max() == 0.0
        # frame = mosaic(downsample(unprocess(x))) over the same window
        linear, _ = rm.unprocess(source, s.meta.pipeline)
        lr = synth.downsample(linear, 4)
        raw = rm.mosaic(lr)
        ox, oy = s.meta.crop_origin
        np.testing.assert_allclose(
            s.frames[0].data, raw.data[oy:oy + 32, ox:ox + 32], atol=1e-6)

    def test_no_shift_zero_noise_frames_identical(self, source):
        rng = np.random.default_rng(5)
        cfg = zero_noise_cfg(crop=32)
        cfg.motion.no_shift = True
        s = synth.generate_burst(source, 5, 4, rng, cfg)
        for frame in s.frames[1:]:
            np.testing.assert_array_equal(frame.data, s.frames[0].data)

    def test_default_config_frames_differ_gt_matches_fov(self, source):
        rng = np.random.default_rng(6)
        cfg = zero_noise_cfg(crop=32)
        s = synth.generate_burst(source, 8, 4, rng, cfg)
        assert any(not np.array_equal(f.data, s.frames[0].data) for f in s.frames[1:])
        gt_lr = synth.downsample(s.gt, 8).data
        proxy = rm.rgb_proxy(rm.pack_bayer(s.frames[0])).data
        a = (gt_lr - gt_lr.mean()).ravel()
        b = (proxy - proxy.mean()).ravel()
        ncc = float(a @ b / np.sqrt((a @ a) * (b @ b)))
        assert ncc > 0.99, f"gt/base NCC {ncc}"

    def test_gt_resolution_and_frame1_conventions(self, source):
        rng = np.random.default_rng(7)
        s = synth.generate_burst(source, 3, 4, rng, zero_noise_cfg(crop=32))
        assert s.gt.shape == (32 * 4, 32 * 4)
        assert s.meta.motions[0].is_identity
        assert np.abs(s.oracle_flows[0].data).max() == 0.0

    def test_warp_residual_property(self, source):
        rng = np.random.default_rng(8)
        s = synth.generate_burst(source, 6, 4, rng, zero_noise_cfg(crop=48))
        base = rm.rgb_proxy(rm.pack_bayer(s.frames[0])).data
        for i in range(1, 6):
            proxy = rm.rgb_proxy(rm.pack_bayer(s.frames[i]))
            warped = flow.warp_image(proxy, s.oracle_flows[i]).data
            margin = int(np.ceil(np.abs(s.oracle_flows[i].data).max())) + 1
            it = (slice(margin, -margin), slice(margin, -margin))
            rmse = np.sqrt(np.mean((warped[it] - base[it]) ** 2))
            assert rmse < 1e-2, f"frame {i}: {rmse}"

    def test_determinism_byte_identical(self, source):
        cfg = synth.SynthConfig(crop=32)
        a = synth.generate_burst(source, 4, 4, np.random.default_rng(9), cfg)
        b = synth.generate_burst(source, 4, 4, np.random.default_rng(9), cfg)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.data, fb.data)
        np.testing.assert_array_equal(a.gt.data, b.gt.data)
        for xa, xb in zip(a.oracle_flows, b.oracle_flows):
            np.testing.assert_array_equal(xa.data, xb.data)

    def test_too_small_source_rejected(self):
        rng = np.random.default_rng(10)
        small = rm.LinearRGB(np.random.default_rng(0).uniform(0, 1, (64, 64, 3))
                             .astype(np.float32))
        with pytest.raises(DimensionError):
            synth.generate_burst(small, 2, 4, rng, synth.SynthConfig(crop=96))


class TestSampleIO:
    def test_write_read_roundtrip(self, source, tmp_path):
        rng = np.random.default_rng(11)
        s = synth.generate_burst(source, 3, 4, rng, synth.SynthConfig(crop=32))
        synth.write_sample(tmp_path / "s0", s)
        loaded = synth.read_sample(tmp_path / "s0")
        assert loaded.burst_size == 3
        for fa, fb in zip(loaded.frames, s.frames):
            np.testing.assert_array_equal(fa.data, fb.data.astype(np.float32))
        np.testing.assert_array_equal(loaded.gt.data, s.gt.data.astype(np.float32))
        for xa, xb in zip(loaded.oracle_flows, s.oracle_flows):
            np.testing.assert_array_equal(xa.data, xb.data)
        assert loaded.meta.motions == s.meta.motions
        assert loaded.meta.scale == 4
        np.testing.assert_allclose(loaded.meta.pipeline.ccm_srgb_to_cam,
                                   s.meta.pipeline.ccm_srgb_to_cam)
