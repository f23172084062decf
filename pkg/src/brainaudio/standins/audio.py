"""Mel front-ends and the Griffin-Lim vocoder stand-in."""
from __future__ import annotations

import math
import warnings
from functools import lru_cache

import librosa
import numpy as np
from scipy.signal import get_window

from ..config import HOP, SAMPLE_RATE
from ..errors import ShapeError

LOG_FLOOR = 1e-6

# (n_mels, window, n_fft, fmin, fmax, symmetric window)
MEL128 = (128, 400, 512, 20.0, 8000.0, True)
MEL64 = (64, 1024, 1024, 0.0, 8000.0, False)


@lru_cache(maxsize=None)
def mel_filterbank(n_mels: int, n_fft: int, fmin: float, fmax: float) -> np.ndarray:
    """Unnormalized HTK-scale triangular filters, shape (n_mels, n_fft // 2 + 1)."""
    with warnings.catch_warnings():
        # 128 bands over a 512-point FFT leaves a few low bands empty, as in Kaldi
        warnings.simplefilter("ignore", UserWarning)
        fb = librosa.filters.mel(
            sr=SAMPLE_RATE, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax, htk=True, norm=None
        )
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return librosa.mel_frequencies(n_mels + 2, fmin=fmin, fmax=fmax, htk=True)[1:-1]


def n_frames(n_samples: int) -> int:
    return math.ceil(n_samples / HOP)


def _power_frames(wave: np.ndarray, win: int, n_fft: int, symmetric: bool) -> np.ndarray:
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ShapeError(f"waveform must be 1-D, got shape {wave.shape}")
    if len(wave) < win:
        raise ShapeError(f"waveform of {len(wave)} samples shorter than one {win}-sample window")
    n = n_frames(len(wave))
    half = win // 2
    padded = np.pad(wave, (half, half), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::HOP][:n]
    window = get_window("hann", win, fftbins=not symmetric)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=-1)
    return (spec.real**2 + spec.imag**2).T  # (n_fft//2+1, F)


def _log_mel(wave, params) -> np.ndarray:
    n_mels, win, n_fft, fmin, fmax, symmetric = params
    power = _power_frames(wave, win, n_fft, symmetric)
    mel = mel_filterbank(n_mels, n_fft, fmin, fmax) @ power
    return np.log(mel + LOG_FLOOR)


def mel_frontend_128(wave) -> np.ndarray:
    """128-band log-mel: 25 ms Hann window, 10 ms hop. Returns (128, ceil(L/160))."""
    return _log_mel(wave, MEL128)


def mel_frontend_64(wave) -> np.ndarray:
    """64-band log-mel: 1024-sample Hann window, hop 160. Returns (64, ceil(L/160))."""
    return _log_mel(wave, MEL64)


def mel128_to_mel64(mel128: np.ndarray) -> np.ndarray:
    """Resample a 128-band log-mel onto the 64-band grid by filter-weighted summation.

    Each 64-band filter is evaluated at the 128-band centre frequencies and
    applied in the power domain; a fixed gain accounts for the different
    window energies of the two front-ends.
    """
    tri, gain = _mel_resampler()
    power = np.exp(np.asarray(mel128, dtype=np.float64)) - LOG_FLOOR
    return np.log(gain * np.maximum(tri @ np.maximum(power, 0.0), 0.0) + LOG_FLOOR)


@lru_cache(maxsize=None)
def _mel_resampler():
    n128, win128, nfft128, f0_128, f1_128, _ = MEL128
    n64, win64, nfft64, f0_64, f1_64, _ = MEL64
    centers = mel_centers(n128, f0_128, f1_128)
    edges = librosa.mel_frequencies(n64 + 2, fmin=f0_64, fmax=f1_64, htk=True)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    tri = np.maximum(0.0, np.minimum((centers - lo) / (mid - lo), (hi - centers) / (hi - mid)))
    w128 = get_window("hann", win128, fftbins=False)
    w64 = get_window("hann", win64, fftbins=True)
    gain = (nfft64 * np.sum(w64**2)) / (nfft128 * np.sum(w128**2))
    return tri, gain


@lru_cache(maxsize=None)
def _filterbank_pinv() -> np.ndarray:
    n_mels, _, n_fft, fmin, fmax, _ = MEL64
    inv = np.linalg.pinv(mel_filterbank(n_mels, n_fft, fmin, fmax))
    inv.setflags(write=False)
    return inv


def vocoder_griffinlim(mel64: np.ndarray, iters: int = 32, seed: int = 0) -> np.ndarray:
    """Invert a 64-band log-mel to a waveform via the filterbank pseudo-inverse + Griffin-Lim.

    Output length is ``F * 160`` samples, clipped to [-1, 1]. Only used for
    listening; no metric consumes it.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n_mels, win, n_fft, fmin, fmax, _ = MEL64
    mel64 = np.asarray(mel64, dtype=np.float64)
    if mel64.shape[0] != n_mels:
        raise ShapeError(f"expected {n_mels} mel bands, got {mel64.shape[0]}")
    power = np.maximum(np.exp(mel64) - LOG_FLOOR, 0.0)
    length = mel64.shape[1] * HOP
    if not power.any():
        return np.zeros(length, dtype=np.float32)
    fb = mel_filterbank(n_mels, n_fft, fmin, fmax)
    stft_power = _filterbank_pinv() @ power
    mag = np.sqrt(np.maximum(stft_power, 0.0))
    # frames are centred on multiples of the hop, as in mel_frontend_64; a
    # centred STFT of F * hop samples has F + 1 frames, so repeat the last one
    mag = np.concatenate([mag, mag[:, -1:]], axis=1)
    wave = librosa.griffinlim(
        mag, n_iter=iters, hop_length=HOP, win_length=win, n_fft=n_fft, window="hann",
        center=True, pad_mode="reflect", length=length, random_state=seed, momentum=0.99,
    )
    return np.clip(wave, -1.0, 1.0).astype(np.float32)
