"""Time-frequency analysis/synthesis, loudness utilities and WAV I/O."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import ConfigurationError, IngestionError

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 44100


@dataclass(frozen=True)
class FrameConfig:
    sample_rate: int = DEFAULT_SAMPLE_RATE
    window_size: int = 4096
    hop_size: int = 1024
    window_function: str = "hann"
    center_pad: bool = True

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigurationError(f"window_size must be positive, got {self.window_size}")
        if not 1 <= self.hop_size <= self.window_size:
            raise ConfigurationError(
                f"hop_size must lie in [1, window_size], got {self.hop_size}")
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def num_bins(self) -> int:
        return self.window_size // 2 + 1

    @property
    def frame_rate(self) -> float:
        """Frames per second."""
        return self.sample_rate / self.hop_size

    def num_frames(self, num_samples: int) -> int:
        if num_samples == 0:
            return 0
        if self.center_pad:
            return num_samples // self.hop_size + 1
        if num_samples < self.window_size:
            return 1
        return (num_samples - self.window_size) // self.hop_size + 1

    def window(self) -> np.ndarray:
        # fftbins=True gives the periodic variant, which is COLA at 75% overlap
        return get_window(self.window_function, self.window_size, fftbins=True)

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "window_size": self.window_size,
            "hop_size": self.hop_size,
            "window_function": self.window_function,
            "center_pad": self.center_pad,
        }


@dataclass
class AudioClip:
    """Time-domain audio, stored as ``[channels, samples]``."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[np.newaxis, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ConfigurationError(
                f"AudioClip expects 1 or 2 channels as [channels, n], got shape {s.shape}")
        if not np.issubdtype(s.dtype, np.floating):
            s = s.astype(np.float64)
        if not np.all(np.isfinite(s)):
            raise ConfigurationError("AudioClip samples must be finite")
        self.samples = s

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate

    @property
    def is_mono(self) -> bool:
        return self.num_channels == 1

    @property
    def mono(self) -> np.ndarray:
        """The single channel of a mono clip as a 1-D array."""
        if not self.is_mono:
            raise ConfigurationError("clip is not mono; downmix or select a channel first")
        return self.samples[0]

    def channel(self, index: int) -> "AudioClip":
        return AudioClip(self.samples[index], self.sample_rate)

    def with_samples(self, samples) -> "AudioClip":
        return AudioClip(samples, self.sample_rate)


@dataclass
class MagSpectrogram:
    values: np.ndarray  # [bins, frames]
    config: FrameConfig = field(default_factory=FrameConfig)

    @property
    def shape(self):
        return self.values.shape

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class PhaseSpectrogram:
    values: np.ndarray  # [bins, frames], radians
    config: FrameConfig = field(default_factory=FrameConfig)

    @property
    def shape(self):
        return self.values.shape


def _analysis_frames(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    n = x.shape[-1]
    win = cfg.window_size
    if cfg.center_pad:
        pad = win // 2
        # numpy's reflect mode handles pads longer than the signal by repeated reflection
        mode = "reflect" if n > 1 else "constant"
        x = np.pad(x, pad, mode=mode)
    elif n < win:
        x = np.pad(x, (0, win - n))
    frames = sliding_window_view(x, win)[:: cfg.hop_size]
    return frames[: cfg.num_frames(n)]


def stft_array(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Complex STFT of a 1-D signal, shape ``[bins, frames]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        return np.zeros((cfg.num_bins, 0), dtype=np.complex128)
    frames = _analysis_frames(x, cfg) * cfg.window()
    return np.fft.rfft(frames, axis=-1).T


def stft(clip: AudioClip, cfg: FrameConfig) -> tuple[MagSpectrogram, PhaseSpectrogram]:
    """Magnitude and phase of the short-time Fourier transform of a mono clip."""
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigurationError(
            f"clip sample rate {clip.sample_rate} does not match config {cfg.sample_rate}")
    spec = stft_array(clip.mono, cfg)
    return MagSpectrogram(np.abs(spec), cfg), PhaseSpectrogram(np.angle(spec), cfg)


def istft_array(spec: np.ndarray, cfg: FrameConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_array`."""
    num_frames = spec.shape[1]
    win, hop = cfg.window_size, cfg.hop_size
    if length is None:
        length = (num_frames - 1) * hop if cfg.center_pad else (num_frames - 1) * hop + win
        length = max(length, 0)
    if num_frames == 0:
        return np.zeros(length)

    w = cfg.window()
    frames = np.fft.irfft(spec.T, n=win, axis=-1) * w
    total = (num_frames - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(num_frames):
        start = t * hop
        out[start:start + win] += frames[t]
        norm[start:start + win] += w2
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]

    offset = win // 2 if cfg.center_pad else 0
    out = out[offset:offset + length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out


def istft_with_phase(mag: MagSpectrogram, phase: PhaseSpectrogram, cfg: FrameConfig,
                     length: int | None = None) -> AudioClip:
    """Resynthesize a waveform from a magnitude and a (typically mixture) phase.

    ``length`` defaults to ``(frames - 1) * hop``, which is within one hop of the
    analyzed signal length; pass the original length to recover it exactly.
    """
    if mag.values.shape != phase.values.shape:
        raise ConfigurationError(
            f"magnitude shape {mag.values.shape} != phase shape {phase.values.shape}")
    if mag.values.shape[0] != cfg.num_bins:
        raise ConfigurationError(
            f"spectrogram has {mag.values.shape[0]} bins, config expects {cfg.num_bins}")
    spec = mag.values * np.exp(1j * phase.values)
    return AudioClip(istft_array(spec, cfg, length), cfg.sample_rate)


def downmix_mono(clip: AudioClip) -> AudioClip:
    if clip.is_mono:
        return clip
    return AudioClip(clip.samples.mean(axis=0), clip.sample_rate)


def rms(clip: AudioClip | np.ndarray) -> float:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.size == 0:
        raise ValueError("rms of an empty signal is undefined")
    return float(np.sqrt(np.mean(np.square(x))))


class Normalized(NamedTuple):
    clip: AudioClip
    gain: float
    unscalable: bool


def normalize_loudness(clip: AudioClip, target_rms: float) -> Normalized:
    """Scale ``clip`` so its RMS equals ``target_rms``.

    Silent clips cannot be scaled to a nonzero RMS; they come back unchanged with
    ``unscalable=True`` so that samplers can keep silent stems in their pools.
    """
    if target_rms <= 0:
        raise ConfigurationError(f"target_rms must be positive, got {target_rms}")
    current = rms(clip) if clip.num_samples else 0.0
    if current == 0.0:
        return Normalized(clip, 1.0, True)
    gain = target_rms / current
    return Normalized(clip.with_samples(clip.samples * gain), gain, False)


# --------------------------------------------------------------------------- WAV

def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # 24-bit files are returned left-aligned in int32 by scipy
        return data.astype(np.float64) / 2147483648.0
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float64)
    raise IngestionError(f"unsupported PCM sample type {data.dtype}")


def resample(clip: AudioClip, sample_rate: int) -> AudioClip:
    if clip.sample_rate == sample_rate:
        return clip
    ratio = Fraction(sample_rate, clip.sample_rate).limit_denominator(1000)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator, axis=1)
    return AudioClip(out, sample_rate)


def read_wav(path, sample_rate: int | None = DEFAULT_SAMPLE_RATE, mono: bool = False) -> AudioClip:
    """Read a linear-PCM or float WAV file, resampling to ``sample_rate``."""
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot decode {path}: {exc}", [path]) from exc
    x = _pcm_to_float(data)
    x = x[np.newaxis, :] if x.ndim == 1 else x.T
    if x.shape[0] > 2:
        log.warning("%s has %d channels; keeping the first two", path, x.shape[0])
        x = x[:2]
    if not np.all(np.isfinite(x)):
        raise IngestionError(f"non-finite samples in {path}", [path])
    clip = AudioClip(x, int(sr))
    if sample_rate is not None:
        clip = resample(clip, sample_rate)
    return downmix_mono(clip) if mono else clip


def write_wav(path, clip: AudioClip) -> Path:
    """Write ``clip`` as 32-bit float WAV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = clip.samples.astype(np.float32)
    wavfile.write(path, clip.sample_rate, data[0] if clip.is_mono else data.T)
    return path


def sine(freq: float, seconds: float, sample_rate: int = DEFAULT_SAMPLE_RATE,
         amplitude: float = 1.0, phase: float = 0.0) -> AudioClip:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioClip(amplitude * np.sin(2 * math.pi * freq * t + phase), sample_rate)
