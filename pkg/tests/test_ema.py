import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artinv.ema import (SENSOR_CHANNELS, TARGET_CHANNELS, EmaRecording, build_targets, constriction_location,
                        design_windowed_sinc, fit_channel_stats, lip_aperture, lip_protrusion, lowpass,
                        reflect_index, resample_to_frame_rate, tract_variables, zscore_fit_apply)
from artinv.errors import (ConstantChannel, DegenerateCoordinate, InvalidCutoff, NegativeRadicand,
                           SchemaError)
from artinv.metrics import mean_sq_second_difference


def dtft_gain(taps, f_norm):
    n = np.arange(len(taps))
    return abs(np.sum(taps * np.exp(-2j * np.pi * f_norm * n)))


def recording(n=120, rate=100.0, seed=0):
    rng = np.random.default_rng(seed)
    base = np.array([1, 8, 1, -8, 0, -12, 10, 4, 25, 8, 40, 2], dtype=float)
    t = np.arange(n) / rate
    motion = np.sin(2 * np.pi * rng.uniform(1, 5, 12)[None, :] * t[:, None] + rng.uniform(0, 6, 12))
    return EmaRecording.from_matrix(base + motion, rate)


class TestKernel:
    def test_design(self):
        k = design_windowed_sinc(25.0, 100.0, 50)
        assert k.taps.shape == (50,)
        assert k.cutoff_norm == 0.25
        assert k.taps.sum() == pytest.approx(1.0, abs=1e-12)
        assert k.taps[0] == k.taps[49]
        np.testing.assert_array_equal(k.taps, k.taps[::-1])

    def test_nyquist_attenuation(self):
        taps = design_windowed_sinc().taps
        assert 20 * np.log10(max(dtft_gain(taps, 0.5), 1e-300)) <= -40

    @pytest.mark.parametrize("fc", [50.0, 60.0, 0.0, -1.0])
    def test_invalid_cutoff(self, fc):
        with pytest.raises(InvalidCutoff):
            design_windowed_sinc(fc, 100.0, 50)

    def test_two_taps_degenerate(self):
        with pytest.raises(ValueError):
            design_windowed_sinc(25.0, 100.0, 2)

    @settings(max_examples=40)
    @given(st.floats(0.01, 0.49), st.integers(3, 80))
    def test_symmetric_unit_dc(self, frac, n):
        k = design_windowed_sinc(frac * 200.0, 200.0, n)
        np.testing.assert_allclose(k.taps, k.taps[::-1], atol=1e-12)
        assert k.taps.sum() == pytest.approx(1.0, abs=1e-12)


class TestLowpass:
    def test_constant(self):
        np.testing.assert_allclose(lowpass(np.full(40, 3.0), design_windowed_sinc()), 3.0, atol=1e-12)

    def test_alternating(self):
        x = np.where(np.arange(200) % 2 == 0, 1.0, -1.0)
        y = lowpass(x, design_windowed_sinc())
        assert np.max(np.abs(y[30:-30])) < 0.01

    def test_white_noise_smoothing(self):
        k = design_windowed_sinc()
        ratios = []
        for seed in range(100):
            x = np.random.default_rng(seed).standard_normal(300)
            ratios.append(mean_sq_second_difference(lowpass(x, k)) / mean_sq_second_difference(x))
        assert max(ratios) <= 0.5

    def test_matches_direct_convolution_interior(self):
        k = design_windowed_sinc()
        x = np.random.default_rng(1).standard_normal(150)
        y = lowpass(x, k)
        # symmetric taps: correlation equals convolution; left pad is 24 samples
        full = np.convolve(x, k.taps, mode="full")
        np.testing.assert_allclose(y[24:-25], full[49:-49], atol=1e-12)

    def test_short_inputs(self):
        k = design_windowed_sinc()
        np.testing.assert_allclose(lowpass(np.array([2.5]), k), [2.5])
        assert lowpass(np.arange(3.0), k).shape == (3,)

    def test_reflect_index_bounds(self):
        for n in (1, 2, 5, 60):
            idx = reflect_index(n, 50)
            assert idx.shape == (n, 50)
            assert idx.min() >= 0 and idx.max() < n

    @settings(max_examples=25)
    @given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, seed, a, b):
        rng = np.random.default_rng(seed)
        u, v = rng.standard_normal((2, 64))
        k = design_windowed_sinc()
        np.testing.assert_allclose(lowpass(a * u + b * v, k), a * lowpass(u, k) + b * lowpass(v, k), atol=1e-10)

    def test_multichannel_columns_independent(self):
        x = np.random.default_rng(2).standard_normal((70, 3))
        k = design_windowed_sinc()
        y = lowpass(x, k)
        for j in range(3):
            np.testing.assert_allclose(y[:, j], lowpass(x[:, j], k), atol=1e-14)


class TestTractVariables:
    def test_constriction_location(self):
        assert constriction_location(3.0, 4.0) == pytest.approx(0.6, abs=1e-12)
        assert constriction_location(1.0, 0.0) == 1.0
        with pytest.raises(DegenerateCoordinate):
            constriction_location(0.0, 0.0)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, x, y, k):
        if np.hypot(x, y) < 1e-6:
            return
        v = constriction_location(x, y)
        assert abs(v) <= 1.0
        assert constriction_location(k * x, k * y) == pytest.approx(v, abs=1e-12)

    def test_lip_aperture_literal(self):
        assert lip_aperture((1.0, 0.0), (0.0, 1.0)) == pytest.approx(np.sqrt(2), abs=1e-12)
        with pytest.raises(NegativeRadicand):
            lip_aperture((0.0, 2.0), (3.0, 0.0))

    def test_lip_aperture_euclidean(self):
        assert lip_aperture((2.0, -3.0), (2.0, -3.0), "euclidean") == 0.0
        assert lip_aperture((0.0, 3.0), (4.0, 0.0), "euclidean") == 5.0
        with pytest.raises(ValueError):
            lip_aperture((0.0, 3.0), (4.0, 0.0), "manhattan")

    def test_lip_protrusion(self):
        assert lip_protrusion(1.0, 0.0) == 0.5
        assert lip_protrusion(2.5, -1.5) == 0.5
        assert lip_protrusion(-7.25, -7.25) == -7.25

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
    def test_protrusion_symmetric(self, a, b):
        assert lip_protrusion(a, b) == lip_protrusion(b, a)

    def test_tract_variable_columns(self):
        rec = recording()
        tv = tract_variables(rec.matrix(), "euclidean")
        c = rec.channels
        np.testing.assert_allclose(tv[:, 0], c["TT_x"] / np.hypot(c["TT_x"], c["TT_y"]))
        np.testing.assert_allclose(tv[:, 1], c["TB_x"] / np.hypot(c["TB_x"], c["TB_y"]))
        np.testing.assert_allclose(tv[:, 2], np.hypot(c["UL_x"] - c["LL_x"], c["UL_y"] - c["LL_y"]))
        np.testing.assert_allclose(tv[:, 3], (c["UL_x"] + c["LL_x"]) / 2)


class TestResample:
    def test_ramp(self):
        traj = np.linspace(0, 1, 500, endpoint=False)
        out = resample_to_frame_rate(traj, 500.0, 98)
        assert out.shape == (98,)
        np.testing.assert_allclose(out, np.arange(98) / 100, atol=1e-12)

    def test_constant(self):
        np.testing.assert_array_equal(resample_to_frame_rate(np.full(250, 7.0), 250.0, 40), 7.0)

    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((50, 16))
        np.testing.assert_array_equal(resample_to_frame_rate(x, 100.0, 50), x)

    def test_holds_last_value(self):
        out = resample_to_frame_rate(np.array([0.0, 1.0]), 100.0, 5)
        np.testing.assert_array_equal(out, [0, 1, 1, 1, 1])


class TestZscore:
    def test_hand_values(self):
        z, stats = zscore_fit_apply(np.array([[1.0], [2.0], [3.0]]))
        np.testing.assert_allclose(z[:, 0], [-1.224744871391589, 0, 1.224744871391589], atol=1e-12)

    def test_fitted_moments(self):
        x = np.random.default_rng(1).standard_normal((200, 16)) * 5 + 3
        z, _ = zscore_fit_apply(x)
        assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)
        z2, _ = zscore_fit_apply(z)
        np.testing.assert_allclose(z2, z, atol=1e-9)

    def test_constant_channel(self):
        x = np.random.default_rng(2).standard_normal((20, 3))
        x[:, 1] = 4.0
        with pytest.raises(ConstantChannel):
            zscore_fit_apply(x)

    def test_round_trip(self):
        x = np.random.default_rng(3).standard_normal((30, 16)) * 10
        stats = fit_channel_stats([x[:10], x[10:]])
        np.testing.assert_allclose(stats.invert(stats.apply(x)), x, atol=1e-9)


class TestRecording:
    def test_missing_channel(self):
        chans = {c: np.zeros(5) for c in SENSOR_CHANNELS[:-1]}
        with pytest.raises(SchemaError):
            EmaRecording(chans, 100.0)

    def test_unequal_lengths(self):
        chans = {c: np.zeros(5) for c in SENSOR_CHANNELS}
        chans["TD_y"] = np.zeros(6)
        with pytest.raises(SchemaError):
            EmaRecording(chans, 100.0)

    def test_non_finite(self):
        data = np.zeros((5, 12))
        data[2, 3] = np.nan
        with pytest.raises(SchemaError):
            EmaRecording.from_matrix(data, 100.0)


class TestBuildTargets:
    def test_shapes_and_order(self):
        rec = recording(n=200)
        seq, stats = build_targets(rec, 190, la_variant="euclidean")
        assert seq.frames.shape == (190, 16)
        assert seq.channel_names == TARGET_CHANNELS
        assert stats.mean.shape == (16,)

    def test_constant_pose_pre_normalisation(self):
        from artinv.ema import articulatory_trajectories

        base = np.array([1, 8, 1, -8, 0, -12, 10, 4, 25, 8, 40, 2], dtype=float)
        rec = EmaRecording.from_matrix(np.tile(base, (300, 1)), 500.0)
        pre = articulatory_trajectories(rec, 50, "euclidean")
        assert pre.shape == (50, 16)
        np.testing.assert_allclose(pre - pre[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(pre[0, :12], base, atol=1e-12)

    def test_deterministic_with_stats(self):
        rec = recording(n=150, seed=4)
        _, stats = build_targets(rec, 150, la_variant="euclidean")
        a, _ = build_targets(rec, 150, stats, la_variant="euclidean")
        b, _ = build_targets(rec, 150, stats, la_variant="euclidean")
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_native_rate_resampled(self):
        rec = recording(n=1000, rate=500.0)
        seq, _ = build_targets(rec, 198, la_variant="euclidean")
        assert len(seq) == 198
