import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqpretrain.frontend import (FeatureMatrix, FrontendError, SpeakerStats, Waveform,
                                  accumulate_speaker_stats, extract_logmel, hz_to_mel,
                                  mel_center_frequencies, mel_to_hz, normalize,
                                  stack_and_downsample)


def count_windows(n_samples, win, hop):
    """Enumerate window start positions that fit entirely inside the signal."""
    count, start = 0, 0
    while start + win <= n_samples:
        count += 1
        start += hop
    return count


def test_one_second_gives_98_frames():
    fm = extract_logmel(Waveform(np.random.default_rng(0).standard_normal(16000), 16000))
    assert fm.frames.shape == (98, 80)
    assert count_windows(16000, 400, 160) == 98
    assert fm.frame_rate == pytest.approx(100.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=400, max_value=6000))
def test_frame_count_formula(n):
    fm = extract_logmel(Waveform(np.ones(n), 16000), n_mels=20)
    assert fm.T == count_windows(n, 400, 160)


def test_silence_hits_log_floor():
    fm = extract_logmel(Waveform(np.zeros(4000), 16000), floor=1e-10)
    assert np.all(fm.frames == np.log(1e-10))


def test_shorter_than_window_rejected():
    with pytest.raises(FrontendError, match="shorter than one"):
        extract_logmel(Waveform(np.zeros(399), 16000))


def test_deterministic():
    w = Waveform(np.random.default_rng(3).standard_normal(8000), 16000)
    assert extract_logmel(w).frames.tobytes() == extract_logmel(w).frames.tobytes()


def _reference_logmel_frame(frame, sr, n_mels, n_fft):
    """Naive DFT + per-bin triangular weights written out longhand."""
    win = len(frame)
    hamming = [0.54 - 0.46 * np.cos(2 * np.pi * i / (win - 1)) for i in range(win)]
    x = [frame[i] * hamming[i] for i in range(win)]
    n_bins = n_fft // 2 + 1
    power = []
    for k in range(n_bins):
        re = sum(x[i] * np.cos(2 * np.pi * k * i / n_fft) for i in range(win))
        im = -sum(x[i] * np.sin(2 * np.pi * k * i / n_fft) for i in range(win))
        power.append(re * re + im * im)
    mel_max = 2595 * np.log10(1 + (sr / 2) / 700)
    edges = [mel_max * j / (n_mels + 1) for j in range(n_mels + 2)]
    energies = []
    for m in range(n_mels):
        lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
        e = 0.0
        for k in range(n_bins):
            bm = 2595 * np.log10(1 + (k * sr / n_fft) / 700)
            if lo < bm <= c:
                e += power[k] * (bm - lo) / (c - lo)
            elif c < bm < hi:
                e += power[k] * (hi - bm) / (hi - c)
        energies.append(e)
    return np.log(np.maximum(energies, 1e-10))


@pytest.mark.parametrize("target_bin", [30, 45, 60, 75])
def test_sine_at_mel_center_peaks_in_that_bin(target_bin):
    sr, n_mels = 16000, 80
    f0 = mel_center_frequencies(n_mels, sr)[target_bin]
    t = np.arange(1600) / sr
    w = Waveform(np.sin(2 * np.pi * f0 * t), sr)
    fm = extract_logmel(w, n_mels=n_mels)
    assert np.all(fm.frames.argmax(axis=1) == target_bin)
    ref = _reference_logmel_frame(w.samples[:400], sr, n_mels, 512)
    assert int(np.argmax(ref)) == target_bin
    np.testing.assert_allclose(fm.frames[0], ref, atol=1e-6)


def test_mel_scale_roundtrip():
    f = np.array([0.0, 100.0, 1000.0, 7999.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)


# -- speaker stats / normalization -----------------------------------------

def test_stats_single_speaker_simple():
    [s] = accumulate_speaker_stats([("a", FeatureMatrix(np.array([[0.0], [2.0]]), 100))])
    assert s.speaker_id == "a" and s.frame_count == 2
    np.testing.assert_array_equal(s.mean, [1.0])
    np.testing.assert_array_equal(s.variance, [1.0])


def test_stats_speakers_independent():
    a = FeatureMatrix(np.array([[0.0, 1.0], [2.0, 3.0]]), 100)
    b = FeatureMatrix(np.array([[10.0, 10.0]]), 100)
    stats = {s.speaker_id: s for s in accumulate_speaker_stats([("a", a), ("b", b)])}
    np.testing.assert_array_equal(stats["a"].mean, [1.0, 2.0])
    np.testing.assert_array_equal(stats["b"].mean, [10.0, 10.0])
    np.testing.assert_array_equal(stats["b"].variance, [0.0, 0.0])


def test_stats_match_two_pass_reference():
    rng = np.random.default_rng(7)
    frames = rng.standard_normal((1000, 5)) * 3 + 11
    utts = [("s", FeatureMatrix(frames[i:i + 100], 100)) for i in range(0, 1000, 100)]
    [s] = accumulate_speaker_stats(utts)
    n = len(frames)
    mean = [sum(frames[t, j] for t in range(n)) / n for j in range(5)]
    var = [sum((frames[t, j] - mean[j]) ** 2 for t in range(n)) / n for j in range(5)]
    np.testing.assert_allclose(s.mean, mean, rtol=1e-10)
    np.testing.assert_allclose(s.variance, var, rtol=1e-10)


def test_speaker_without_frames_is_excluded(caplog):
    with caplog.at_level(logging.WARNING):
        stats = accumulate_speaker_stats([("empty", np.zeros((0, 3))), ("ok", np.ones((2, 3)))])
    assert [s.speaker_id for s in stats] == ["ok"]
    assert "empty" in caplog.text


def test_normalize_mean_frames_to_zero():
    s = SpeakerStats("a", np.array([1.0, 2.0]), np.array([4.0, 9.0]), 10)
    out = normalize(FeatureMatrix(np.tile([1.0, 2.0], (3, 1)), 100), s)
    np.testing.assert_array_equal(out.frames, 0.0)
    assert out.frame_rate == 100


def test_normalize_zero_variance_is_finite():
    s = SpeakerStats("a", np.array([1.0]), np.array([0.0]), 3)
    out = normalize(FeatureMatrix(np.array([[1.0], [2.0]]), 100), s)
    assert np.all(np.isfinite(out.frames))


def test_normalize_dim_mismatch():
    s = SpeakerStats("a", np.zeros(2), np.ones(2), 1)
    with pytest.raises(FrontendError):
        normalize(FeatureMatrix(np.zeros((2, 3)), 100), s)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_self_normalization(T, d, seed):
    rng = np.random.default_rng(seed)
    f = FeatureMatrix(rng.standard_normal((T, d)) * rng.uniform(0.5, 5, d) + rng.uniform(-5, 5, d), 100)
    [s] = accumulate_speaker_stats([("x", f)])
    out = normalize(f, s).frames
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-4)


# -- stacking ----------------------------------------------------------------

def test_stack_full_size_dims():
    f = FeatureMatrix(np.random.default_rng(0).standard_normal((30, 80)), 100.0)
    out = stack_and_downsample(f, left=3, factor=3)
    assert out.dim == 320
    assert out.frame_rate == pytest.approx(100 / 3)


def test_stack_identity():
    f = FeatureMatrix(np.random.default_rng(1).standard_normal((7, 4)), 100.0)
    out = stack_and_downsample(f, left=0, factor=1)
    np.testing.assert_array_equal(out.frames, f.frames)
    assert out.frame_rate == 100.0


def test_stack_t7_by_hand():
    frames = np.arange(7)[:, None] * np.ones((1, 2)) + np.array([0.0, 0.5])
    out = stack_and_downsample(FeatureMatrix(frames, 100.0), left=3, factor=3)
    assert out.T == 3
    expected_rows = [[0, 0, 0, 0], [0, 1, 2, 3], [3, 4, 5, 6]]
    for r, idx in enumerate(expected_rows):
        np.testing.assert_array_equal(out.frames[r], np.concatenate([frames[i] for i in idx]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(0, 5), st.integers(1, 5))
def test_stack_shape_property(T, d, left, factor):
    f = FeatureMatrix(np.zeros((T, d)), 100.0)
    out = stack_and_downsample(f, left, factor)
    assert out.dim == (left + 1) * d
    assert out.T == -(-T // factor)


def test_stack_rejects_bad_args():
    f = FeatureMatrix(np.zeros((3, 2)), 100.0)
    with pytest.raises(FrontendError):
        stack_and_downsample(f, left=-1)
    with pytest.raises(FrontendError):
        stack_and_downsample(f, factor=0)


def test_feature_matrix_rejects_nonfinite():
    with pytest.raises(FrontendError):
        FeatureMatrix(np.array([[np.nan]]), 100)
    with pytest.raises(FrontendError):
        Waveform(np.zeros(3), 0)
