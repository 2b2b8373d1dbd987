"""Waveform containers, WAV I/O, STFT, and inter-channel phase features.

All functions here are pure and operate on numpy arrays in float64. The
learned front-end consumes these as plain matrices; nothing in this module
carries gradients.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile


class UnsupportedWavError(ValueError):
    """Raised for corrupt WAV headers or sample formats we do not read."""


class EmptyAudioError(ValueError):
    """Raised when a WAV file contains no samples."""


_INT16_SCALE = 32768.0


@dataclass(frozen=True)
class Waveform:
    """A single-channel signal: samples (nominally in [-1, 1]) plus rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass(frozen=True)
class MultichannelMixture:
    """Ordered channels of equal rate and length; channel 0 is the reference."""

    channels: tuple[Waveform, ...]

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) < 1:
            raise ValueError("mixture needs at least one channel")
        rate = channels[0].sample_rate
        length = channels[0].num_samples
        for ch in channels[1:]:
            if ch.sample_rate != rate:
                raise ValueError("all channels must share one sample rate")
            if ch.num_samples != length:
                raise ValueError("all channels must have equal length")
        object.__setattr__(self, "channels", channels)

    @property
    def num_channels(self) -> int:
        return len(self.channels)

    @property
    def num_samples(self) -> int:
        return self.channels[0].num_samples

    @property
    def sample_rate(self) -> int:
        return self.channels[0].sample_rate

    @property
    def reference(self) -> Waveform:
        return self.channels[0]

    def as_matrix(self) -> np.ndarray:
        """Stack channels into a (num_channels, num_samples) matrix."""
        return np.stack([ch.samples for ch in self.channels])

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, sample_rate: int) -> "MultichannelMixture":
        matrix = np.atleast_2d(np.asarray(matrix))
        return cls(tuple(Waveform(row, sample_rate) for row in matrix))


@dataclass(frozen=True)
class Spectrogram:
    """One-sided complex STFT, frequency_bins x frames."""

    values: np.ndarray
    window_length: int
    hop_length: int
    sample_rate: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("spectrogram values must be 2-D")
        if self.values.shape[0] != self.window_length // 2 + 1:
            raise ValueError("frequency bin count inconsistent with window length")

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class IPDFeatures:
    """Real matrix of per-bin phase-difference features, entries in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("IPD features must be 2-D")
        if np.any(np.abs(self.values) > 1.0 + 1e-12):
            raise ValueError("IPD feature out of [-1, 1]")

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def read_wav(path) -> MultichannelMixture:
    """Read a linear-PCM WAV file (int16 or float32) as a mixture.

    int16 samples are scaled by 1/32768 so full-scale 32767 maps to
    32767/32768. Raises FileNotFoundError, UnsupportedWavError, or
    EmptyAudioError depending on what is wrong with the file.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise UnsupportedWavError(f"unsupported/corrupt WAV: {path}: {exc}") from exc
    if data.size == 0:
        raise EmptyAudioError(f"zero-length audio: {path}")
    if data.dtype == np.int16:
        scaled = data.astype(np.float64) / _INT16_SCALE
    elif data.dtype == np.float32:
        scaled = data.astype(np.float64)
    else:
        raise UnsupportedWavError(
            f"unsupported/corrupt WAV: {path}: sample format {data.dtype} "
            "(only int16 and float32 PCM are read)"
        )
    if scaled.ndim == 1:
        scaled = scaled[:, None]
    # wavfile gives samples x channels; we store channels x samples
    return MultichannelMixture.from_matrix(scaled.T, int(rate))


def write_wav(path, wave: Waveform | MultichannelMixture, bit_depth: str = "float32") -> None:
    """Write a waveform or mixture to a WAV file.

    bit_depth 'float32' round-trips losslessly through read_wav; 'int16'
    quantizes, with round-trip error at most 2**-15.
    """
    if isinstance(wave, Waveform):
        matrix = wave.samples[None, :]
        rate = wave.sample_rate
    else:
        matrix = wave.as_matrix()
        rate = wave.sample_rate
    data = matrix.T  # samples x channels
    if data.shape[1] == 1:
        data = data[:, 0]
    if bit_depth == "float32":
        out = data.astype(np.float32)
    elif bit_depth == "int16":
        quantized = np.round(data * _INT16_SCALE)
        out = np.clip(quantized, -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported bit depth: {bit_depth}")
    wavfile.write(path, rate, out)


def hann_periodic(window_length: int) -> np.ndarray:
    """Periodic Hann window, the analysis window used throughout."""
    n = np.arange(window_length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window_length)


def frame_count(num_samples: int, window_length: int, hop_length: int) -> int:
    """Number of complete frames with no centering or tail padding."""
    if num_samples < window_length:
        return 0
    return (num_samples - window_length) // hop_length + 1


def stft(wave: Waveform, window_length: int, hop_length: int) -> Spectrogram:
    """Short-time Fourier transform with a periodic Hann window.

    Frame t covers samples [t*hop, t*hop + window); the trailing partial
    frame is dropped and no padding is applied. Returns the one-sided
    spectrum (window_length//2 + 1 bins).
    """
    if hop_length < 1 or window_length < hop_length:
        raise ValueError("need window_length >= hop_length >= 1")
    if wave.num_samples < window_length:
        raise ValueError(
            f"signal of {wave.num_samples} samples is shorter than one "
            f"{window_length}-sample window"
        )
    frames = frame_count(wave.num_samples, window_length, hop_length)
    window = hann_periodic(window_length)
    starts = np.arange(frames) * hop_length
    segments = wave.samples[starts[:, None] + np.arange(window_length)]
    values = np.fft.rfft(segments * window, axis=1).T
    return Spectrogram(values, window_length, hop_length, wave.sample_rate)


def ipd_features(
    mix: MultichannelMixture,
    window_length: int,
    hop_length: int,
    include_sin: bool = False,
) -> IPDFeatures:
    """Cosine of the inter-channel phase difference per STFT bin.

    For each bin, feature = cos(angle(S1) - angle(S0)) where S0/S1 are the
    STFTs of the reference and second channel. Bins where either channel
    has zero magnitude yield 1 (cos) and 0 (sin) by convention. With
    include_sin, the sin features are stacked below the cos block.
    """
    if mix.num_channels != 2:
        raise ValueError(f"IPD needs exactly 2 channels, got {mix.num_channels}")
    ref = stft(mix.channels[0], window_length, hop_length).values
    other = stft(mix.channels[1], window_length, hop_length).values
    # cos/sin of the phase difference without computing angles explicitly:
    # S1 * conj(S0) has angle(S1) - angle(S0).
    cross = other * np.conj(ref)
    denom = np.abs(other) * np.abs(ref)
    silent = denom == 0.0
    safe = np.where(silent, 1.0, denom)
    cos_feat = np.where(silent, 1.0, cross.real / safe)
    cos_feat = np.clip(cos_feat, -1.0, 1.0)
    if not include_sin:
        return IPDFeatures(cos_feat)
    sin_feat = np.where(silent, 0.0, cross.imag / safe)
    sin_feat = np.clip(sin_feat, -1.0, 1.0)
    return IPDFeatures(np.concatenate([cos_feat, sin_feat], axis=0))


def nearest_frame_indices(num_frames: int, target_frames: int) -> np.ndarray:
    """Source index per output frame: j -> floor(j * num_frames / target)."""
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    if num_frames < 1:
        raise ValueError("need at least one input frame")
    return (np.arange(target_frames) * num_frames) // target_frames


def upsample_frames(features: np.ndarray, target_frames: int) -> np.ndarray:
    """Nearest-neighbor resampling of a feature matrix along the frame axis."""
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix (bins x frames)")
    idx = nearest_frame_indices(features.shape[1], target_frames)
    return features[:, idx]
