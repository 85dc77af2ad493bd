"""Pre-correlation features: segmentation and STFT magnitude spectrograms.

Spectrogram matrices are ``(fft_size, num_frames)``: rows are DFT bins in
numpy order (bin ``f`` at ``f * fs / N`` Hz, negative frequencies in the upper
half), columns are frames. Each frame is the DFT of the windowed frame with a
frame-local time index.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import DataError, ValidationError
from .sigmodel import IqSegment, Label

LOG_FLOOR = 1e-12


class Window(str, enum.Enum):
    HANN = "hann"
    HAMMING = "hamming"
    RECT = "rect"

    def coefficients(self, n: int) -> np.ndarray:
        if self is Window.RECT:
            return np.ones(n)
        # periodic windows (COLA at 50 % overlap for Hann)
        return sps.get_window(self.value, n, fftbins=True)


class Normalization(str, enum.Enum):
    RAW = "raw"
    LOGSTD = "logstd"
    FRAMERATIO = "frameratio"


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 256
    hop: int = 128
    window: Window = Window.HANN
    segment_samples: int | None = None
    decimation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "window", Window(self.window))
        n = self.fft_size
        if n < 1 or n & (n - 1):
            raise ValidationError(f"fft_size must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValidationError(f"hop must satisfy 0 < hop <= fft_size, got {self.hop}")
        if self.decimation < 1:
            raise ValidationError("decimation must be >= 1")
        if self.segment_samples is not None and self.segment_samples < n:
            raise ValidationError("segment_samples must be >= fft_size")

    def frames_for(self, num_samples: int) -> int:
        if num_samples < self.fft_size:
            raise ValidationError(f"need at least {self.fft_size} samples, got {num_samples}")
        return (num_samples - self.fft_size) // self.hop + 1

    @property
    def num_frames(self) -> int:
        if self.segment_samples is None:
            raise ValidationError("segment_samples not set")
        return self.frames_for(self.segment_samples)

    def shape_for(self, raw_segment_samples: int, normalization="logstd") -> tuple[int, int]:
        """Spectrogram shape for a segment of ``raw_segment_samples`` before decimation."""
        n = -(-raw_segment_samples // self.decimation) if self.decimation > 1 else raw_segment_samples
        k = self.frames_for(n)
        if Normalization(normalization) is Normalization.FRAMERATIO:
            k -= 1
        return (self.fft_size, k)


@dataclass
class Spectrogram:
    magnitudes: np.ndarray
    config: StftConfig
    normalization: Normalization = Normalization.RAW

    def __post_init__(self):
        self.normalization = Normalization(self.normalization)
        if self.magnitudes.ndim != 2 or self.magnitudes.shape[0] != self.config.fft_size:
            raise ValidationError(f"spectrogram shape {self.magnitudes.shape} does not match fft_size")
        if not np.all(np.isfinite(self.magnitudes)):
            raise ValidationError("spectrogram has non-finite entries")
        if self.normalization is Normalization.RAW and np.any(self.magnitudes < 0):
            raise ValidationError("raw spectrogram has negative entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitudes.shape


def stft(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT, shape ``(fft_size, num_frames)``."""
    x = np.asarray(samples, dtype=np.complex128)
    n, hop = cfg.fft_size, cfg.hop
    k = cfg.frames_for(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, n)[::hop][:k]
    return np.fft.fft(frames * cfg.window.coefficients(n), axis=1).T


def hadamard_apply(h: np.ndarray, fx: np.ndarray) -> np.ndarray:
    """Elementwise channel-times-fingerprint product ``H * F(X)``."""
    h = np.asarray(h)
    fx = np.asarray(fx)
    if h.shape != fx.shape:
        raise ValidationError(f"hadamard_apply: shape mismatch {h.shape} vs {fx.shape}")
    return h * fx


def normalize_magnitudes(mag: np.ndarray, normalization) -> np.ndarray:
    norm = Normalization(normalization)
    if norm is Normalization.RAW:
        return mag
    if norm is Normalization.LOGSTD:
        lg = np.log(mag + LOG_FLOOR)
        mu = lg.mean(axis=1, keepdims=True)
        sd = lg.std(axis=1, keepdims=True)
        centred = lg - mu
        return np.divide(centred, sd, out=np.zeros_like(centred), where=sd > 0)
    if mag.shape[1] < 2:
        raise ValidationError("frameratio needs at least two frames")
    num, den = mag[:, 1:], mag[:, :-1]
    safe = den > 0
    return np.where(safe, num / np.where(safe, den, 1.0), (num + LOG_FLOOR) / (den + LOG_FLOOR))


def magnitude_spectrogram(samples: np.ndarray, cfg: StftConfig,
                          normalization=Normalization.LOGSTD) -> Spectrogram:
    """Magnitude STFT with optional channel normalisation.

    ``logstd`` standardises ``log(|R| + 1e-12)`` within each frequency row;
    ``frameratio`` divides each frame by the previous one, cancelling any
    channel that is constant over the segment (drops the first frame).
    """
    mag = np.abs(stft(samples, cfg))
    return Spectrogram(normalize_magnitudes(mag, normalization), cfg, normalization)


def decimate(samples: np.ndarray, factor: int) -> np.ndarray:
    """FIR anti-alias filter and keep every ``factor``-th sample."""
    if factor == 1:
        return np.asarray(samples)
    return sps.decimate(np.asarray(samples), factor, ftype="fir", zero_phase=True)


def segment_spectrogram(segment: IqSegment | np.ndarray, cfg: StftConfig,
                        normalization=Normalization.LOGSTD) -> Spectrogram:
    """Decimate by ``cfg.decimation`` then compute the spectrogram."""
    x = segment.samples if isinstance(segment, IqSegment) else segment
    return magnitude_spectrogram(decimate(x, cfg.decimation), cfg, normalization)


def segment_bounds(num_samples: int, sample_rate_hz: float,
                   segment_duration_s: float = 0.004) -> list[tuple[int, int]]:
    """``[start, stop)`` sample ranges of consecutive non-overlapping segments.

    Every segment holds ``round(duration * fs)`` samples and segment ``i``
    starts at ``i`` times that; a trailing partial segment is dropped.
    """
    if num_samples <= 0:
        raise DataError("empty capture")
    if segment_duration_s <= 0 or sample_rate_hz <= 0:
        raise ValidationError("segment duration and sample rate must be positive")
    seg = int(round(segment_duration_s * sample_rate_hz))
    if seg < 1:
        raise ValidationError("segment shorter than one sample")
    count = num_samples // seg
    if count == 0:
        raise DataError(f"capture of {num_samples} samples shorter than one segment ({seg})")
    return [(i * seg, (i + 1) * seg) for i in range(count)]


def segment_capture(capture: np.ndarray, sample_rate_hz: float,
                    segment_duration_s: float = 0.004, label=Label.CLEAN,
                    source_tag: str = "", check_finite: bool = True) -> list[IqSegment]:
    """Split a capture into segments (views, no copies)."""
    capture = np.asarray(capture)
    bounds = segment_bounds(len(capture), sample_rate_hz, segment_duration_s)
    label = Label.parse(label)
    segs = []
    for a, b in bounds:
        x = capture[a:b]
        if check_finite and not np.all(np.isfinite(x)):
            raise DataError(f"non-finite samples in segment starting at sample {a}")
        segs.append(IqSegment(x, sample_rate_hz, a / sample_rate_hz, label, source_tag))
    return segs


def expected_segment_count(duration_s: float, segment_duration_s: float = 0.004) -> int:
    return int(math.floor(duration_s / segment_duration_s + 1e-9))
