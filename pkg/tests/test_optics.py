import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from nirs_speech.optics import (
    ConfigurationError,
    ExtinctionTable,
    FilterSpec,
    HemoSeries,
    OpticalRecording,
    OpticsError,
    apply_filter,
    design_lowpass,
    filter_report,
    frequency_response,
    load_extinction,
    mbll_invert,
    optical_density,
)
from nirs_speech.synth import mbll_forward

FILT = design_lowpass(FilterSpec())
STOP_GRID = np.round(np.arange(50, 501) * 0.01, 10)  # 0.5 .. 5.0 Hz


def _recording(samples, reference):
    return OpticalRecording(np.asarray(samples, float), np.asarray(reference, float))


def _series(hbo):
    hbo = np.asarray(hbo, float)
    return HemoSeries(hbo, np.zeros_like(hbo))


def _solve2(m, v):
    # Cramer's rule, independent of numpy.linalg
    (a, b), (c, d) = m
    det = a * d - b * c
    return np.array([(v[0] * d - b * v[1]) / det, (a * v[1] - c * v[0]) / det])


def _random_table(rng):
    while True:
        eps = rng.uniform(0.01, 1.0, (2, 2))
        if np.linalg.cond(eps) < 1e4:
            return ExtinctionTable(eps, rng.uniform(10, 50), tuple(rng.uniform(3, 8, 2)))


class TestOpticalDensity:
    def test_identity_is_zero(self):
        ref = np.full((3, 2), 2.5)
        od = optical_density(_recording(np.broadcast_to(ref, (10, 3, 2)), ref))
        assert np.all(od == 0)

    def test_tenfold_drop_is_one(self):
        ref = np.ones((2, 2))
        samples = np.ones((5, 2, 2))
        samples[3, 1, 0] = 0.1
        od = optical_density(_recording(samples, ref))
        assert od[3, 1, 0] == pytest.approx(1.0, abs=1e-15)
        assert np.count_nonzero(od) == 1

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        ref = rng.uniform(0.2, 3, (44, 2))
        samples = rng.uniform(0.01, 5, (50, 44, 2))
        od = optical_density(_recording(samples, ref))
        back = ref * 10.0 ** (-od)
        np.testing.assert_allclose(back, samples, rtol=1e-12)

    def test_nonpositive_intensity_names_location(self):
        samples = np.ones((4, 3, 2))
        samples[2, 1, 1] = 0.0
        with pytest.raises(OpticsError, match=r"sample 2, channel 2, 830 nm"):
            optical_density(_recording(samples, np.ones((3, 2))))


class TestMbll:
    def test_zero(self):
        hemo = mbll_invert(np.zeros((3, 44, 2)), load_extinction())
        assert np.all(hemo.hbo == 0) and np.all(hemo.hbr == 0)

    def test_identity_table(self):
        table = ExtinctionTable(np.eye(2), source_distance_mm=1.0, dpf=(1.0, 1.0))
        hemo = mbll_invert(np.array([[[0.3, 0.7]]]), table)
        # identity path matrix gives mM; reported in uM
        assert hemo.hbo[0, 0] / 1000 == pytest.approx(0.3, rel=1e-15)
        assert hemo.hbr[0, 0] / 1000 == pytest.approx(0.7, rel=1e-15)

    def test_against_closed_form_solver(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            table = _random_table(rng)
            od = rng.normal(0, 0.1, 2)
            hemo = mbll_invert(od.reshape(1, 1, 2), table)
            want = 1000 * _solve2(table.path_matrix(), od)
            got = np.array([hemo.hbo[0, 0], hemo.hbr[0, 0]])
            assert np.max(np.abs(got - want)) <= 1e-9 * np.max(np.abs(want))

    def test_forward_inverse_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            table = _random_table(rng)
            hbo, hbr = rng.normal(0, 5, (2, 4, 3))
            hemo = mbll_invert(mbll_forward(hbo, hbr, table), table)
            scale = max(np.abs(hbo).max(), np.abs(hbr).max())
            assert np.max(np.abs(hemo.hbo - hbo)) <= 1e-9 * scale
            assert np.max(np.abs(hemo.hbr - hbr)) <= 1e-9 * scale

    def test_singular_table_rejected(self):
        with pytest.raises(ConfigurationError):
            ExtinctionTable([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(ConfigurationError):
            ExtinctionTable([[1.0, 1.0], [1.0, 1.0 + 1e-14]])

    def test_table_file_round_trip(self, tmp_path):
        table = load_extinction()
        path = tmp_path / "ext.json"
        path.write_text(__import__("json").dumps(table.to_dict()))
        again = load_extinction(path)
        assert np.array_equal(again.epsilon, table.epsilon)
        assert again.dpf == table.dpf and again.source_distance_mm == 30.0


class TestRecordingCsv:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        rec = OpticalRecording(rng.uniform(0.5, 1.5, (20, 44, 2)), rng.uniform(0.5, 1.5, (44, 2)))
        path = rec.write_csv(tmp_path / "rec.csv")
        header = path.read_text().splitlines()[1]
        assert header.startswith("t,ch01_695,ch01_830,ch02_695")
        assert header.endswith("ch44_830")
        back = OpticalRecording.read_csv(path)
        assert np.array_equal(back.samples, rec.samples)
        assert np.array_equal(back.reference, rec.reference)


class TestFilterDesign:
    def test_dc_gain(self):
        assert abs(frequency_response(FILT, [0.0])[0]) == pytest.approx(1.0, abs=1e-6)

    def test_stopband_grid(self):
        mag = np.abs(frequency_response(FILT, STOP_GRID))
        assert np.all(mag <= 10 ** (-50 / 20))

    def test_stable(self):
        assert FILT.is_stable()
        assert len(FILT.b) == len(FILT.a) == 4

    def test_matches_scipy_reference(self):
        b, a = signal.cheby2(3, 50, 0.5, btype="low", fs=10.0)
        np.testing.assert_allclose(FILT.b, b, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(FILT.a, a, rtol=1e-12, atol=1e-15)

    @pytest.mark.parametrize(
        "kwargs", [{"stopband_hz": 6.0}, {"order": 0}, {"stopband_hz": 5.0}, {"stopband_attenuation_db": 0}]
    )
    def test_infeasible_spec(self, kwargs):
        with pytest.raises(ConfigurationError):
            design_lowpass(FilterSpec(**kwargs))

    def test_report(self):
        rows, summary = filter_report(FILT)
        assert rows[0][0] == 0.0 and rows[-1][0] == 5.0 and len(rows) == 501
        assert abs(summary["dc_gain_db"]) < 0.01
        assert summary["min_stopband_attenuation_db"] >= 50.0
        # droop at 0.1 Hz is reported, not required to meet the nominal ripple
        assert 0 < summary["passband_droop_db"] < 3
        assert summary["stable"]


class TestApplyFilter:
    def test_zero_in_zero_out(self):
        out = apply_filter(FILT, _series(np.zeros((100, 44))))
        assert np.all(out.hbo == 0)

    def test_step_settles(self):
        out = apply_filter(FILT, _series(np.full((600, 44), 5.0)))
        assert np.all(np.abs(out.hbo[-100:] - 5.0) <= 5.0 * 1e-3)

    def test_sinusoid_in_stopband(self):
        t = np.arange(3000) / 10.0
        x = np.sin(2 * np.pi * 1.0 * t)
        out = apply_filter(FILT, _series(np.tile(x[:, None], (1, 44))))
        assert np.max(np.abs(out.hbo[1000:, 0])) <= 10 ** (-50 / 20)

    def test_channel_count_checked(self):
        with pytest.raises(OpticsError):
            apply_filter(FILT, _series(np.zeros((10, 43))))

    def test_impulse_decays(self):
        x = np.zeros((10_000, 44))
        x[0] = 1.0
        h = apply_filter(FILT, _series(x)).hbo[:, 0]
        assert np.all(np.abs(h[-100:]) < 1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-10, 10), st.floats(-10, 10), st.integers(0, 2**32 - 1))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 200, 44))
        lhs = apply_filter(FILT, _series(a * x + b * y)).hbo
        rhs = a * apply_filter(FILT, _series(x)).hbo + b * apply_filter(FILT, _series(y)).hbo
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.abs(rhs).max())

    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**32 - 1))
    def test_shift_invariance(self, k, seed):
        x = np.random.default_rng(seed).standard_normal((200, 44))
        delayed = np.vstack([np.zeros((k, 44)), x])
        y = apply_filter(FILT, _series(x)).hbo
        yd = apply_filter(FILT, _series(delayed)).hbo
        np.testing.assert_allclose(yd[k:], y, atol=1e-12)
        assert np.all(yd[:k] == 0)

    def test_is_causal(self):
        x = np.random.default_rng(2).standard_normal((300, 44))
        x2 = x.copy()
        x2[200:] += 10
        a = apply_filter(FILT, _series(x)).hbo
        b = apply_filter(FILT, _series(x2)).hbo
        assert np.array_equal(a[:200], b[:200])


def test_default_table_carries_provenance_note():
    table = load_extinction()
    assert table.note
    assert math.isclose(table.source_distance_mm, 30.0)
