import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faceanon.video import (
    LandmarkTrack,
    TooFewFramesWarning,
    mean_displacement,
    smooth_series,
    smooth_track,
    smooth_track_entries,
    split_on_gaps,
)


def make_track(points):
    points = np.asarray(points, dtype=np.float64)
    return LandmarkTrack(points, np.arange(len(points), dtype=np.float64))


def noisy_sinusoid(seed, frames=120, points=5):
    rng = np.random.default_rng(seed)
    t = np.arange(frames)
    phase = rng.uniform(0, 2 * np.pi, (points, 2))
    clean = 10 * np.sin(2 * np.pi * t[:, None, None] / 60 + phase[None]) + 50
    return clean, clean + rng.normal(0, 1.0, clean.shape)


def rms(a, b):
    return float(np.sqrt(np.mean((a - b) ** 2)))


def test_constant_track_unchanged():
    pts = np.full((20, 3, 2), 7.5)
    np.testing.assert_allclose(smooth_track(make_track(pts)).points, pts, atol=1e-9)


def test_linear_track_reproduced():
    t = np.arange(30.0)
    pts = np.stack([np.stack([2 * t + 1, -0.5 * t + 3], -1)] * 4, 1)
    np.testing.assert_allclose(smooth_track(make_track(pts)).points, pts, atol=1e-9)


def test_noise_reduced_on_sinusoid():
    clean, noisy = noisy_sinusoid(0)
    out = smooth_track(make_track(noisy)).points
    assert rms(out, clean) < rms(noisy, clean)


def test_displacement_reduced():
    _, noisy = noisy_sinusoid(1)
    assert mean_displacement(smooth_track(make_track(noisy)).points) <= mean_displacement(noisy)


def test_shape_preserved_and_too_few_frames():
    pts = np.random.default_rng(0).random((3, 41, 2))
    with pytest.warns(TooFewFramesWarning):
        out = smooth_track(make_track(pts))
    np.testing.assert_array_equal(out.points, pts)
    pts = np.random.default_rng(0).random((15, 41, 2))
    assert smooth_track(make_track(pts)).points.shape == pts.shape


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3))
def test_smoothing_is_linear(seed, alpha):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 25, 2, 2))
    f = lambda p: smooth_track(make_track(p)).points  # noqa: E731
    np.testing.assert_allclose(f(alpha * x), alpha * f(x), atol=1e-9)
    np.testing.assert_allclose(f(x + y), f(x) + f(y), atol=1e-9)


def test_timestamps_strictly_increasing():
    with pytest.raises(ValueError):
        LandmarkTrack(np.zeros((3, 2, 2)), [0, 1, 1])


def test_split_on_gaps():
    assert split_on_gaps([0, 1, 2, 5, 6, 20, 21], 4) == [[0, 1, 2, 5, 6], [20, 21]]


def test_short_gap_filled_from_spline():
    frames = [f for f in range(20) if f not in (8, 9)]
    entries = [{"frame": f, "landmarks": [[2.0 * f, 3.0], [f, -f]]} for f in frames]
    out = smooth_track_entries(entries)
    assert sorted(out) == list(range(20))
    np.testing.assert_allclose(out[9], [[18.0, 3.0], [9.0, -9.0]], atol=1e-9)


def test_long_gap_splits():
    frames = list(range(10)) + list(range(30, 40))
    entries = [{"frame": f, "landmarks": [[f, 0.0]]} for f in frames]
    out = smooth_track_entries(entries)
    assert sorted(out) == frames


def test_window_query_uses_neighbours_only():
    t = np.arange(40.0)
    y = np.where(t < 20, 0.0, 100.0)[:, None]
    out = smooth_series(t, y, window=9, degree=3)
    assert np.all(out[:15] == pytest.approx(0.0, abs=1e-9))
    assert np.all(out[25:] == pytest.approx(100.0, abs=1e-9))
