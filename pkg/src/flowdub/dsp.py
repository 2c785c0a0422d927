"""Waveform <-> log-mel transforms, energy contours and Griffin-Lim inversion.

Fixed analysis config: 16 kHz mono, Hann window of 1024 samples, hop 256,
80 mel bands over 0-8000 Hz, no centering. Frame t covers samples
[t*hop, t*hop + win), so T = 1 + (n - win) // hop.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SAMPLE_RATE = 16000
N_FFT = 1024
WIN_LENGTH = 1024
HOP_LENGTH = 256
N_MELS = 80
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"only {SAMPLE_RATE} Hz is supported, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0 + 1e-6:
            raise ValueError("waveform samples exceed [-1, 1]")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def _samples(w) -> np.ndarray:
    if isinstance(w, Waveform):
        return w.samples
    arr = np.asarray(w, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError("waveform contains non-finite samples")
    return arr


def n_frames(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    if n_samples < win:
        raise ValueError(f"input of {n_samples} samples is shorter than one window ({win})")
    return 1 + (n_samples - win) // hop


def n_samples_for(frames: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    return (frames - 1) * hop + win


@lru_cache(maxsize=8)
def hann(win: int) -> np.ndarray:
    # periodic Hann: sums to a constant under 75% overlap
    n = np.arange(win)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)
    w.setflags(write=False)
    return w


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    T = n_frames(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    return x[idx]


def stft(w, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Complex T x (win//2 + 1) spectrum of Hann-windowed frames."""
    frames = frame_signal(_samples(w), win, hop)
    return np.fft.rfft(frames * hann(win), axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def _mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
        if fb[i].sum() == 0.0:
            # band narrower than the FFT bin spacing: take the nearest bin
            fb[i, np.argmin(np.abs(freqs - mid))] = 1.0
    fb /= fb.sum(axis=1, keepdims=True)
    fb.setflags(write=False)
    return fb


def mel_filterbank(sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular filters, n_mels x (n_fft//2 + 1), each row summing to 1."""
    return _mel_filterbank(sr, n_fft, n_mels, float(fmin), float(fmax))


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_spectrogram(w) -> np.ndarray:
    """T x 80 matrix of log(max(mel power, 1e-5))."""
    power = np.abs(stft(w)) ** 2
    mel = power @ mel_filterbank().T
    return np.log(np.maximum(mel, LOG_FLOOR))


def frame_rms(w, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    x = _samples(w)
    if x.size == 0:
        raise ValueError("empty waveform")
    frames = frame_signal(x, win, hop)
    return np.sqrt(np.mean(frames * frames, axis=1))


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def energy_contour(w, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Per-frame RMS, min-max normalized to [0, 1] per utterance."""
    return minmax_normalize(frame_rms(w, win, hop))


def mel_to_linear(mel: np.ndarray) -> np.ndarray:
    """Linear magnitude from log-mel: filterbank pseudo-inverse of the power, clamped at 0."""
    mel = np.asarray(mel, dtype=np.float64)
    if not np.all(np.isfinite(mel)):
        raise ValueError("non-finite mel spectrogram")
    power = np.exp(mel)
    # silent floor frames carry no energy
    power[np.all(mel <= np.log(LOG_FLOOR) + 1e-9, axis=1)] = 0.0
    return np.sqrt(np.maximum(power @ _pinv_filterbank().T, 0.0))


@lru_cache(maxsize=1)
def _pinv_filterbank() -> np.ndarray:
    p = np.linalg.pinv(mel_filterbank())
    p.setflags(write=False)
    return p


def istft(spec: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Least-squares inverse: window-weighted overlap-add over summed squared windows."""
    T = spec.shape[0]
    n = n_samples_for(T, win, hop)
    frames = np.fft.irfft(spec, n=win, axis=1) * hann(win)
    out = np.zeros(n)
    norm = np.zeros(n)
    w2 = hann(win) ** 2
    for t in range(T):
        out[t * hop:t * hop + win] += frames[t]
        norm[t * hop:t * hop + win] += w2
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def _spectral_weights(win: int) -> np.ndarray:
    # one-sided bins standing in for two full-spectrum bins count twice
    wts = np.full(win // 2 + 1, 2.0)
    wts[0] = 1.0
    if win % 2 == 0:
        wts[-1] = 1.0
    return wts


def spectral_convergence(estimate_mag: np.ndarray, target_mag: np.ndarray) -> float:
    """||est - target|| / ||target|| in the full-spectrum Frobenius norm."""
    wts = np.sqrt(_spectral_weights(2 * (target_mag.shape[1] - 1)))
    num = np.linalg.norm((estimate_mag - target_mag) * wts)
    den = np.linalg.norm(target_mag * wts)
    return float(num / den) if den > 0 else float(num)


def griffin_lim_linear(mag: np.ndarray, iters: int, seed: int = 0, residuals: list | None = None) -> np.ndarray:
    """Phase retrieval for a T x F linear magnitude; returns samples."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    mag = np.asarray(mag, dtype=np.float64)
    if not np.all(np.isfinite(mag)):
        raise ValueError("non-finite spectrogram")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase)
    for _ in range(iters):
        S = stft(x)
        if residuals is not None:
            residuals.append(spectral_convergence(np.abs(S), mag))
        phase = np.exp(1j * np.angle(S))
        x = istft(mag * phase)
    return x


def griffin_lim(mel: np.ndarray, iters: int = 32, seed: int = 0, residuals: list | None = None) -> Waveform:
    """Invert a log-mel spectrogram to a waveform.

    ``residuals``, if given, receives the spectral convergence measured at the
    start of every iteration; the sequence is non-increasing.
    """
    mag = mel_to_linear(mel)
    x = griffin_lim_linear(mag, iters, seed=seed, residuals=residuals)
    return Waveform(np.clip(x, -1.0, 1.0))
