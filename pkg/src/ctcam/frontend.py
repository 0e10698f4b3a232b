"""Log-mel front end, frame stacking/decimation and feature file I/O."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, InputTooShortError

LOG_FLOOR = 1e-10
PREEMPHASIS = 0.97
FEATURE_MAGIC = b"CTCF1"
_FEATURE_HEADER = struct.Struct("<5sIIff")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # int16
    sample_rate_hz: int = 16000

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("waveform must be a non-empty 1-D sample sequence")
        if self.sample_rate_hz <= 0:
            raise ConfigError("sample rate must be positive")
        object.__setattr__(self, "samples", samples.astype(np.int16, copy=False))


@dataclass(frozen=True)
class FeatureMatrix:
    data: np.ndarray  # (T, D)
    frame_shift_ms: float = 10.0
    window_ms: float = 25.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(f"feature matrix must be T x D with T, D >= 1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("feature matrix contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class StackConfig:
    """Frame stacking: ``stack`` frames per super-frame, advancing ``skip`` frames."""

    stack: int = 1
    skip: int = 1
    pad_edge: bool = True

    def __post_init__(self):
        if self.stack < 1 or self.skip < 1:
            raise ConfigError(f"stack and skip must be >= 1, got {self.stack}/{self.skip}")


# Presets for the stacking configurations used by the model families.
STACK_PRESETS = {
    "ctc-uni": StackConfig(stack=8, skip=3),
    "ctc-bi": StackConfig(stack=3, skip=3),
    "ce-uni": StackConfig(stack=8, skip=1),
    "ce-bi": StackConfig(stack=1, skip=1),
}


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular mel filters, shape ``(n_mels, n_fft // 2 + 1)``.

    Filter edges are equally spaced on the mel scale between ``fmin`` and
    ``fmax`` (Nyquist by default); neighbouring triangles share edges, so a
    frequency bin carries non-zero weight in at most two adjacent filters.
    """
    if n_mels < 1 or n_fft < 2:
        raise ConfigError("invalid config: n_mels and n_fft must be positive")
    fmax = sample_rate_hz / 2.0 if fmax is None else fmax
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lower) / (center - lower)
    falling = (upper - bin_hz[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def num_frames(n_samples: int, window_samples: int, shift_samples: int) -> int:
    if n_samples < window_samples:
        return 0
    return (n_samples - window_samples) // shift_samples + 1


def compute_logmel(wave: Waveform, n_mels: int = 80, window_ms: float = 25.0,
                   shift_ms: float = 10.0) -> FeatureMatrix:
    """Log mel filterbank energies of a waveform.

    Pre-emphasis, Hann window, power spectrum on the next power-of-two FFT,
    triangular mel filters. The power spectrum is floored at ``LOG_FLOOR``
    before filtering so silent input stays finite.
    """
    if n_mels < 1 or window_ms <= 0 or shift_ms <= 0:
        raise ConfigError("invalid config: n_mels, window_ms and shift_ms must be positive")
    sr = wave.sample_rate_hz
    win = int(round(window_ms * sr / 1000.0))
    shift = int(round(shift_ms * sr / 1000.0))
    if win < 1 or shift < 1:
        raise ConfigError("invalid config: window/shift shorter than one sample")
    n = num_frames(wave.samples.size, win, shift)
    if n == 0:
        raise InputTooShortError(
            f"input too short: {wave.samples.size} samples < window of {win}")

    x = wave.samples.astype(np.float64)
    x = np.concatenate([x[:1], x[1:] - PREEMPHASIS * x[:-1]])
    idx = np.arange(win)[None, :] + shift * np.arange(n)[:, None]
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)  # periodic Hann
    frames = x[idx] * hann
    n_fft = 1 << (win - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fbank = mel_filterbank(n_mels, n_fft, sr)
    energies = np.maximum(power, LOG_FLOOR) @ fbank.T
    return FeatureMatrix(np.log(energies), frame_shift_ms=float(shift_ms),
                         window_ms=float(window_ms))


def stack_frames(feat: FeatureMatrix, cfg: StackConfig) -> FeatureMatrix:
    """Concatenate ``cfg.stack`` consecutive frames, emitting one super-frame every ``cfg.skip``.

    Super-frame ``t`` covers input frames ``t*skip .. t*skip + stack - 1``; indices
    past the end replicate the last frame. Output length is ``ceil(T / skip)``.
    """
    T, D = feat.data.shape
    starts = np.arange(0, T, cfg.skip)
    idx = starts[:, None] + np.arange(cfg.stack)[None, :]
    if cfg.pad_edge:
        idx = np.minimum(idx, T - 1)
    elif np.any(idx >= T):
        # without edge padding, trailing super-frames that run off the end are dropped
        keep = idx[:, -1] < T
        if not np.any(keep):
            raise DataError("input too short for stacking without padding")
        idx = idx[keep]
    data = feat.data[idx].reshape(idx.shape[0], cfg.stack * D)
    return FeatureMatrix(data, frame_shift_ms=feat.frame_shift_ms * cfg.skip,
                         window_ms=feat.window_ms)


@dataclass
class Normalizer:
    """Per-dimension mean/variance normalization estimated on a training set."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats: Iterable[FeatureMatrix], floor: float = 1e-5) -> "Normalizer":
        count, total, total_sq = 0, 0.0, 0.0
        for f in feats:
            count += f.num_frames
            total = total + f.data.sum(axis=0)
            total_sq = total_sq + (f.data ** 2).sum(axis=0)
        if count == 0:
            raise DataError("cannot fit normalizer on an empty feature set")
        mean = total / count
        var = np.maximum(total_sq / count - mean ** 2, floor ** 2)
        return cls(mean=mean, std=np.sqrt(var))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def __call__(self, feat: FeatureMatrix) -> FeatureMatrix:
        return FeatureMatrix((feat.data - self.mean) / self.std,
                             feat.frame_shift_ms, feat.window_ms)


def write_features(path: str | Path, feat: FeatureMatrix) -> None:
    T, D = feat.data.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, T, D, feat.frame_shift_ms, feat.window_ms))
        fh.write(feat.data.astype("<f4").tobytes(order="C"))


def read_features(path: str | Path) -> FeatureMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, T, D, shift_ms, window_ms = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    body = raw[_FEATURE_HEADER.size:]
    if len(body) != 4 * T * D:
        raise DataError(f"{path}: expected {T}x{D} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").reshape(T, D)
    return FeatureMatrix(data, frame_shift_ms=float(shift_ms), window_ms=float(window_ms))


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise DataError(f"{path}: expected 16-bit mono PCM")
        rate = wf.getframerate()
        frames = wf.readframes(wf.getnframes())
    return Waveform(np.frombuffer(frames, dtype="<i2"), rate)


def write_wav(path: str | Path, wave_: Waveform) -> None:
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave_.sample_rate_hz)
        wf.writeframes(wave_.samples.astype("<i2").tobytes())


def load_features(path: str | Path, n_mels: int = 80) -> FeatureMatrix:
    """Read a feature file, or compute log-mels if ``path`` is a WAV file."""
    if str(path).lower().endswith(".wav"):
        return compute_logmel(read_wav(path), n_mels=n_mels)
    return read_features(path)


def stacked_length(n_frames: int, cfg: StackConfig) -> int:
    return math.ceil(n_frames / cfg.skip)
