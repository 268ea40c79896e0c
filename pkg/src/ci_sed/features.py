"""Log-mel front end for WAV ingestion.

Defaults: 16 kHz audio, 1024-sample Hann window, 320-sample hop, 64 HTK mel
bands with unit-peak triangular filters, natural log with a 1e-10 floor.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WIN = 1024
HOP = 320
MEL_BINS = 64
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected mono samples, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples contain non-finite values")
        object.__setattr__(self, "samples", samples)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray
    frame_hop: float

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def n_frames(length: int, win: int, hop: int) -> int:
    return (length - win) // hop + 1


def stft_power(clip: AudioClip, win: int = WIN, hop: int = HOP) -> np.ndarray:
    """Hann-windowed |STFT|^2, shape ``[win // 2 + 1, frames]``."""
    if hop <= 0:
        raise ValueError(f"hop must be positive, got {hop}")
    x = clip.samples
    if len(x) < win:
        raise ValueError(f"clip of {len(x)} samples is shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft_bins: int, mel_bins: int) -> np.ndarray:
    """Triangular HTK filters ``[mel_bins, n_fft_bins]``, each peaking at exactly 1.

    Filter centres sit on FFT bins, so each row's maximum is reached at one
    bin.  Raises when there are too few FFT bins for distinct centres.
    """
    if mel_bins < 2:
        raise ValueError(f"mel_bins must be >= 2, got {mel_bins}")
    if mel_bins > n_fft_bins - 2:
        raise ValueError(f"{mel_bins} mel bins exceed the {n_fft_bins} spectral bins available")
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bins + 2))
    edges = np.round(edges_hz / (sample_rate / 2.0) * (n_fft_bins - 1)).astype(int)
    # snap to strictly increasing bins so every triangle is non-degenerate
    for i in range(1, len(edges)):
        edges[i] = max(edges[i], edges[i - 1] + 1)
    if edges[-1] > n_fft_bins - 1:
        raise ValueError(f"{mel_bins} mel bins exceed the {n_fft_bins} spectral bins available")
    bins = np.arange(n_fft_bins)
    fb = np.zeros((mel_bins, n_fft_bins))
    for j in range(mel_bins):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        up = (bins - lo) / (mid - lo)
        down = (hi - bins) / (hi - mid)
        fb[j] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def mel_centers(sample_rate: int, n_fft_bins: int, mel_bins: int) -> np.ndarray:
    """Centre frequency (Hz) of each filter, i.e. the bin where it peaks."""
    fb = mel_filterbank(sample_rate, n_fft_bins, mel_bins)
    return fb.argmax(axis=1) * (sample_rate / 2.0) / (n_fft_bins - 1)


def mel_project(power: np.ndarray, sample_rate: int = SAMPLE_RATE, mel_bins: int = MEL_BINS) -> np.ndarray:
    """``log(filterbank @ power + 1e-10)``, shape ``[mel_bins, frames]``."""
    power = np.asarray(power, dtype=np.float64)
    fb = mel_filterbank(sample_rate, power.shape[0], mel_bins)
    return np.log(fb @ power + LOG_FLOOR)


def log_mel(clip: AudioClip, win: int = WIN, hop: int = HOP, mel_bins: int = MEL_BINS) -> Spectrogram:
    values = mel_project(stft_power(clip, win, hop), clip.sample_rate, mel_bins)
    return Spectrogram(values, hop / clip.sample_rate)


def read_wav(path) -> AudioClip:
    """Read a PCM16 mono RIFF/WAVE file into floats in [-1, 1)."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        raise ValueError(f"{path}: not an uncompressed PCM WAV file ({exc})") from exc
    if channels != 1:
        raise ValueError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: expected 16-bit PCM samples, found {8 * width}-bit")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())
