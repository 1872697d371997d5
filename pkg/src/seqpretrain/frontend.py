"""Acoustic feature frontend.

Waveform -> log-mel filterbank -> per-speaker mean/variance normalization ->
left-context stacking with frame-rate reduction.

Filterbank conventions (fixed so features are reproducible bit-for-bit):

* Hamming window of ``win_ms``, no pre-emphasis, no dithering, no DC removal.
* FFT size is the next power of two >= window length; power spectrum |X|^2.
* HTK mel scale ``2595 * log10(1 + f / 700)``; ``n_mels + 2`` points equally
  spaced in mel between ``fmin`` and ``fmax`` (default Nyquist). Triangular
  weights are evaluated in the mel domain at each FFT bin frequency.
* Energies are floored at ``floor`` (default 1e-10) before the natural log.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
EPS_VAR = 1e-8


class FrontendError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise FrontendError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    """A T x d feature sequence and its frame rate in Hz."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise FrontendError(f"frames must be 2-D, got shape {frames.shape}")
        if frames.shape[0] < 1:
            raise FrontendError("feature matrix has no frames")
        if not np.all(np.isfinite(frames)):
            raise FrontendError("feature matrix contains non-finite values")
        self.frames = frames
        self.frame_rate = float(self.frame_rate)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class SpeakerStats:
    speaker_id: str
    mean: np.ndarray
    variance: np.ndarray
    frame_count: int


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def mel_points(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """The ``n_mels + 2`` filter edge/center frequencies in Hz."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_center_frequencies(n_mels: int = 80, sample_rate: int = 16000, fmin: float = 0.0,
                           fmax: Optional[float] = None) -> np.ndarray:
    fmax = sample_rate / 2.0 if fmax is None else fmax
    return mel_points(n_mels, fmin, fmax)[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0,
                   fmax: Optional[float] = None) -> np.ndarray:
    """Triangular filter weights, shape (n_mels, n_fft // 2 + 1)."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = hz_to_mel(mel_points(n_mels, fmin, fmax))
    bin_mel = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_mel[None, :] - left) / (center - left)
    falling = (right - bin_mel[None, :]) / (right - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


def extract_logmel(w: Waveform, n_mels: int = 80, win_ms: float = 25.0, hop_ms: float = 10.0,
                   floor: float = LOG_FLOOR, n_fft: Optional[int] = None) -> FeatureMatrix:
    """Compute natural-log mel filterbank energies.

    Returns a ``T x n_mels`` matrix with ``T = 1 + floor((len - win) / hop)``
    counted in samples, and frame rate ``1000 / hop_ms``.
    """
    win = int(round(w.sample_rate * win_ms / 1000.0))
    hop = int(round(w.sample_rate * hop_ms / 1000.0))
    if win < 1 or hop < 1:
        raise FrontendError(f"window/hop too short at {w.sample_rate} Hz: win={win}, hop={hop}")
    n = len(w.samples)
    if n < win:
        raise FrontendError(
            f"waveform has {n} samples ({w.duration_ms:.2f} ms), shorter than one "
            f"{win_ms} ms window ({win} samples)")
    n_fft = _next_pow2(win) if n_fft is None else int(n_fft)
    if n_fft < win:
        raise FrontendError(f"n_fft={n_fft} smaller than window length {win}")

    T = num_frames(n, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = w.samples[idx] * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    feats = np.log(np.maximum(energies, floor))
    return FeatureMatrix(feats, 1000.0 / hop_ms)


def accumulate_speaker_stats(feats: Iterable[Tuple[str, FeatureMatrix]]) -> List[SpeakerStats]:
    """Per-speaker mean and population variance over all frames.

    Speakers are returned in order of first appearance. Sums are accumulated
    in that same order, so results do not depend on hashing.
    """
    sums = {}
    for spk, fm in feats:
        frames = np.asarray(getattr(fm, "frames", fm), dtype=np.float64)
        if spk not in sums:
            sums[spk] = []
        sums[spk].append(frames)

    stats = []
    for spk, chunks in sums.items():
        count = sum(c.shape[0] for c in chunks)
        if count == 0:
            logger.warning("speaker %s has no frames; excluded from normalization stats", spk)
            continue
        dims = {c.shape[1] for c in chunks}
        if len(dims) != 1:
            raise FrontendError(f"speaker {spk} has inconsistent feature dims {sorted(dims)}")
        allf = np.concatenate(chunks, axis=0)
        mean = allf.mean(axis=0)
        var = ((allf - mean) ** 2).mean(axis=0)
        stats.append(SpeakerStats(spk, mean, var, count))
    return stats


def normalize(f: FeatureMatrix, s: SpeakerStats, eps_var: float = EPS_VAR) -> FeatureMatrix:
    if f.dim != len(s.mean):
        raise FrontendError(f"feature dim {f.dim} does not match speaker stats dim {len(s.mean)}")
    out = (f.frames - s.mean) / np.sqrt(s.variance + eps_var)
    return FeatureMatrix(out, f.frame_rate)


def stack_and_downsample(f: FeatureMatrix, left: int = 3, factor: int = 3) -> FeatureMatrix:
    """Splice each kept frame with its ``left`` predecessors, keep every ``factor``-th.

    Output frame ``t'`` is the concatenation of input frames
    ``factor*t' - left, ..., factor*t'`` (oldest first); indices below zero
    repeat frame 0. Output has ``ceil(T / factor)`` frames of dim
    ``(left + 1) * d``.
    """
    if left < 0 or factor < 1:
        raise FrontendError(f"need left >= 0 and factor >= 1, got left={left}, factor={factor}")
    centers = np.arange(0, f.T, factor)
    offsets = np.arange(-left, 1)
    idx = np.maximum(centers[:, None] + offsets[None, :], 0)
    stacked = f.frames[idx].reshape(len(centers), (left + 1) * f.dim)
    return FeatureMatrix(stacked, f.frame_rate / factor)


def normalize_corpus(items: Sequence[Tuple[str, FeatureMatrix]],
                     eps_var: float = EPS_VAR) -> List[FeatureMatrix]:
    """Normalize every (speaker, features) pair with that speaker's stats."""
    stats = {s.speaker_id: s for s in accumulate_speaker_stats(items)}
    return [normalize(fm, stats[spk], eps_var) for spk, fm in items]

