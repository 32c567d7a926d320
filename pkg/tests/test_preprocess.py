import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neuroretrieve.dataio import EEGClip
from neuroretrieve.preprocess import (
    FilterSpec,
    apply_filter,
    denormalize,
    design_bandpass,
    filter_data,
    fit_norm,
    normalize,
    preprocess_clip,
    resample,
    sos_response,
)


def analog_bandpass_mag(f, lo, hi, order, fs):
    """Bilinear-transformed Butterworth band-pass magnitude from the prewarped analog prototype."""
    w = np.tan(np.pi * np.asarray(f) / fs)
    wl, wh = np.tan(np.pi * lo / fs), np.tan(np.pi * hi / fs)
    x = (w**2 - wl * wh) / (w * (wh - wl))
    return 1.0 / np.sqrt(1.0 + x ** (2 * order))


def sine_gain(sos, f, fs, zero_phase, seconds=32, settle=8):
    n = int(seconds * fs)
    t = np.arange(n) / fs
    y = filter_data(np.sin(2 * np.pi * f * t)[None], sos, zero_phase=zero_phase)[0]
    seg = y[int(settle * fs) : int(settle * fs) + int(16 * fs)]
    spec = np.abs(np.fft.rfft(seg)) * 2 / len(seg)
    return spec[int(round(f * 16))]


@pytest.mark.parametrize("kw", [dict(order=0), dict(low_hz=95, high_hz=55), dict(low_hz=0), dict(high_hz=512)])
def test_filter_spec_validation(kw):
    with pytest.raises(ValueError):
        FilterSpec(**kw)


@given(
    lo=st.floats(1, 200),
    width=st.floats(5, 200),
    order=st.integers(1, 6),
    f=st.floats(0.5, 500),
)
def test_bandpass_matches_analog_prototype(lo, width, order, f):
    spec = FilterSpec(lo, lo + width, order, 1024.0)
    sos = design_bandpass(spec)
    got = np.abs(sos_response(sos, [f], 1024.0))[0]
    assert got == pytest.approx(analog_bandpass_mag(f, lo, lo + width, order, 1024.0), abs=1e-9)


def test_bandpass_poles_inside_unit_circle():
    sos = design_bandpass(FilterSpec())
    assert sos.shape == (4, 6)
    for sec in sos:
        assert np.all(np.abs(np.roots(sec[3:])) < 1)


@pytest.mark.parametrize("f", [20.0, 55.0, 75.0, 95.0, 150.0])
def test_single_pass_sine_gain_matches_response(f):
    sos = design_bandpass(FilterSpec())
    expected = np.abs(sos_response(sos, [f], 1024.0))[0]
    assert sine_gain(sos, f, 1024.0, zero_phase=False) == pytest.approx(expected, abs=2e-3)


@pytest.mark.parametrize("f", [55.0, 75.0, 95.0])
def test_zero_phase_squares_the_magnitude(f):
    sos = design_bandpass(FilterSpec())
    expected = np.abs(sos_response(sos, [f], 1024.0))[0] ** 2
    assert sine_gain(sos, f, 1024.0, zero_phase=True) == pytest.approx(expected, abs=2e-3)


def test_zero_phase_has_no_lag():
    fs, f = 1024.0, 75.0
    t = np.arange(4096) / fs
    x = np.sin(2 * np.pi * f * t)[None]
    sos = design_bandpass(FilterSpec())
    y = filter_data(x, sos, zero_phase=True)[0]
    mid = slice(1024, 3072)
    # in-band sine passes with the same phase: residual is tiny compared to the signal
    assert np.max(np.abs(y[mid] - x[0, mid])) < 0.02
    # a single pass shifts it by the response's phase angle
    h = sos_response(sos, [f], fs)[0]
    assert abs(np.angle(h)) > 0.1
    shifted = np.abs(h) * np.sin(2 * np.pi * f * t + np.angle(h))
    np.testing.assert_allclose(filter_data(x, sos, zero_phase=False)[0][mid], shifted[mid], atol=1e-3)


def test_short_clip_filters_without_error():
    clip = EEGClip("s", np.random.default_rng(0).standard_normal((2, 8)), 1024.0)
    out = apply_filter(clip, design_bandpass(FilterSpec()))
    assert out.data.shape == (2, 8) and np.all(np.isfinite(out.data))


def test_resample_keeps_passband_and_removes_alias():
    fs = 4096.0
    t = np.arange(int(2 * fs)) / fs
    low = np.sin(2 * np.pi * 50 * t)
    high = np.sin(2 * np.pi * 700 * t)  # folds to 324 Hz at 1024 Hz without an anti-alias filter
    out = resample(EEGClip("r", np.stack([low, high]), fs), 1024.0)
    assert out.fs == 1024.0 and out.data.shape == (2, 2048)
    mid = slice(256, 1792)
    np.testing.assert_allclose(out.data[0, mid], low[::4][mid], atol=1e-3)
    assert np.max(np.abs(out.data[1, mid])) < 1e-3


@pytest.mark.parametrize("target", [4096.0, 5000.0, 1000.0])
def test_resample_rejects_bad_rates(target):
    with pytest.raises(ValueError):
        resample(EEGClip("r", np.zeros((1, 64)), 4096.0), target)


def test_preprocess_clip_checks_filter_rate():
    clip = EEGClip("p", np.zeros((1, 4096)), 4096.0)
    with pytest.raises(ValueError, match="designed for"):
        preprocess_clip(clip, None, FilterSpec(fs=1024.0))
    out = preprocess_clip(clip, 1024.0, FilterSpec(fs=1024.0))
    assert out.fs == 1024.0 and out.n_samples == 1024


@given(seed=st.integers(0, 2**16), V=st.integers(1, 5), n=st.integers(1, 4))
def test_normalize_train_pool_is_standard(seed, V, n):
    rng = np.random.default_rng(seed)
    clips = [EEGClip(str(i), rng.normal(rng.normal(0, 5, (V, 1)), rng.uniform(0.5, 3, (V, 1)), (V, 50)), 100.0) for i in range(n)]
    stats = fit_norm(clips)
    pooled = np.concatenate([normalize(c, stats).data for c in clips], axis=1)
    np.testing.assert_allclose(pooled.mean(1), 0, atol=1e-10)
    np.testing.assert_allclose(pooled.std(1), 1, atol=1e-10)
    back = denormalize(normalize(clips[0], stats), stats)
    np.testing.assert_allclose(back.data, clips[0].data, atol=1e-10)


def test_constant_channel_warns_and_floors():
    clip = EEGClip("c", np.vstack([np.full(10, 3.0), np.arange(10.0)]), 10.0)
    with pytest.warns(UserWarning, match="zero-variance"):
        stats = fit_norm([clip])
    assert stats.std[0] == 1e-8
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        out = normalize(clip, stats)
    assert np.all(out.data[0] == 0)


def test_fit_norm_needs_clips():
    with pytest.raises(ValueError):
        fit_norm([])
