"""DSP kernels: STFT/ISTFT, complex masking, channel recombination, envelopes,
the two evaluation distances, and WAV I/O.

Spectrograms are stored as two real planes ``[2, F, T]`` (real, imaginary).
``apply_mask`` and ``recombine`` only use indexing and arithmetic, so they work
unchanged on numpy arrays and on torch tensors (with a leading batch axis).
"""

from __future__ import annotations

import os
import wave
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.io.wavfile
import scipy.signal


class SignalError(ValueError):
    """Base class for invalid-signal errors."""


class LengthError(SignalError):
    pass


class DataError(SignalError):
    pass


class ShapeError(SignalError):
    pass


class ConfigurationError(SignalError):
    pass


class WavFormatError(SignalError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Time-domain audio, ``samples`` shaped ``[channels, num_samples]``."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] not in (1, 2):
            raise ShapeError(f"waveform must have 1 or 2 channels, got shape {s.shape}")
        if s.shape[1] == 0:
            raise LengthError("waveform has no samples")
        if not np.all(np.isfinite(s)):
            raise DataError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def left(self) -> np.ndarray:
        return self.samples[0]

    @property
    def right(self) -> np.ndarray:
        return self.samples[-1]


@dataclass(frozen=True)
class StftParams:
    window_len: int = 400
    hop: int = 160
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.window_len <= self.fft_size:
            raise ConfigurationError(
                f"need 0 < hop <= window_len <= fft_size, got "
                f"hop={self.hop} window_len={self.window_len} fft_size={self.fft_size}"
            )

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window_len) // self.hop + 1

    def output_length(self, num_frames: int) -> int:
        return (num_frames - 1) * self.hop + self.window_len

    def window_array(self) -> np.ndarray:
        return _window(self.window, self.window_len)

    def to_dict(self) -> dict:
        return {"window_len": self.window_len, "hop": self.hop,
                "fft_size": self.fft_size, "window": self.window}


DEFAULT_STFT = StftParams()


@lru_cache(maxsize=16)
def _window(name: str, length: int) -> np.ndarray:
    w = scipy.signal.get_window(name, length, fftbins=True).astype(np.float64)
    w.setflags(write=False)
    return w


def overlap_add_weight(params: StftParams, num_frames: int) -> np.ndarray:
    """Sum of squared analysis windows at every output sample."""
    w2 = params.window_array() ** 2
    out = np.zeros(params.output_length(num_frames))
    for t in range(num_frames):
        out[t * params.hop: t * params.hop + params.window_len] += w2
    return out


def steady_state_weight(params: StftParams) -> np.ndarray:
    """One hop of the summed squared window away from the signal edges."""
    periods = -(-params.window_len // params.hop) + 1
    weight = overlap_add_weight(params, 2 * periods)
    return weight[params.window_len: params.window_len + params.hop]


def check_overlap_add(params: StftParams, tol: float = 1e-3) -> None:
    """Raise ConfigurationError unless the window/hop pair can be inverted.

    Reconstruction divides by the summed squared window, so every sample in
    the steady-state region must be covered with a weight bounded away from 0.
    """
    steady = steady_state_weight(params)
    if steady.size == 0 or steady.min() < tol * max(steady.max(), 1e-300):
        raise ConfigurationError(
            f"window {params.window!r}/{params.window_len} at hop {params.hop} "
            "does not overlap-add to a non-vanishing weight"
        )


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT as real/imag planes ``[2, F, T]``."""

    planes: np.ndarray
    params: StftParams = field(default=DEFAULT_STFT)

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 3 or p.shape[0] != 2:
            raise ShapeError(f"spectrogram planes must be [2, F, T], got {p.shape}")
        if p.shape[1] != self.params.num_bins:
            raise ShapeError(f"expected {self.params.num_bins} bins, got {p.shape[1]}")
        if not np.all(np.isfinite(p)):
            raise DataError("spectrogram contains non-finite entries")
        object.__setattr__(self, "planes", p)

    @property
    def num_frames(self) -> int:
        return self.planes.shape[2]

    def to_complex(self) -> np.ndarray:
        return self.planes[0] + 1j * self.planes[1]

    @classmethod
    def from_complex(cls, z: np.ndarray, params: StftParams = DEFAULT_STFT) -> "Spectrogram":
        return cls(np.stack([z.real, z.imag]), params)

    def __add__(self, other: "Spectrogram") -> "Spectrogram":
        return Spectrogram(self.planes + other.planes, self.params)

    def __sub__(self, other: "Spectrogram") -> "Spectrogram":
        return Spectrogram(self.planes - other.planes, self.params)


def _as_mono(w) -> np.ndarray:
    if isinstance(w, Waveform):
        if w.channels != 1:
            raise ShapeError("expected a mono waveform")
        return w.samples[0]
    x = np.asarray(w, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D signal, got shape {x.shape}")
    return x


def stft_frames(x: np.ndarray, params: StftParams = DEFAULT_STFT) -> np.ndarray:
    """Complex STFT of ``x[..., num_samples]`` -> ``[..., F, T]``.

    Frames start at multiples of ``hop`` with no centering padding; each frame is
    windowed and zero-padded to ``fft_size``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < params.window_len:
        raise LengthError(f"need at least {params.window_len} samples, got {n}")
    if not np.all(np.isfinite(x)):
        raise DataError("signal contains non-finite samples")
    frames = np.lib.stride_tricks.sliding_window_view(x, params.window_len, axis=-1)
    frames = frames[..., :: params.hop, :]
    spec = np.fft.rfft(frames * params.window_array(), n=params.fft_size, axis=-1)
    return np.swapaxes(spec, -1, -2)


def stft(w, params: StftParams = DEFAULT_STFT) -> Spectrogram:
    """STFT of a mono waveform (``Waveform`` or 1-D array)."""
    z = stft_frames(_as_mono(w), params)
    return Spectrogram(np.stack([z.real, z.imag]), params)


def istft_frames(z: np.ndarray, params: StftParams = DEFAULT_STFT) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_frames` for ``[..., F, T]``.

    The normalizer is clamped from below at its steady-state minimum: the
    interior is reconstructed exactly while the partially covered edges are
    tapered rather than amplified (an inconsistent spectrogram would
    otherwise blow up where the window sum approaches 0).
    """
    check_overlap_add(params)
    z = np.asarray(z)
    num_frames = z.shape[-1]
    win = params.window_array()
    frames = np.fft.irfft(np.swapaxes(z, -1, -2), n=params.fft_size, axis=-1)
    frames = frames[..., : params.window_len] * win
    out = np.zeros(z.shape[:-2] + (params.output_length(num_frames),))
    for t in range(num_frames):
        out[..., t * params.hop: t * params.hop + params.window_len] += frames[..., t, :]
    weight = overlap_add_weight(params, num_frames)
    return out / np.maximum(weight, steady_state_weight(params).min())


def istft(s: Spectrogram, sample_rate: int = 16000) -> Waveform:
    if not isinstance(s, Spectrogram):
        s = Spectrogram(np.asarray(s))
    return Waveform(istft_frames(s.to_complex(), s.params), sample_rate)


def interior(num_frames: int, params: StftParams = DEFAULT_STFT) -> slice:
    """Samples covered by the full complement of overlapping frames."""
    return slice(params.window_len, params.output_length(num_frames) - params.window_len)


def _planes(x):
    return x.planes if isinstance(x, Spectrogram) else x


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def apply_mask(a, m):
    """Complex product ``M * A`` per time-frequency bin.

    Plane axis is ``-3``: accepts ``Spectrogram``/arrays ``[2, F, T]`` and
    batched arrays or tensors ``[B, 2, F, T]``.
    """
    ap, mp = _planes(a), _planes(m)
    _check_same_shape(ap, mp)
    ar, ai = ap[..., 0, :, :], ap[..., 1, :, :]
    mr, mi = mp[..., 0, :, :], mp[..., 1, :, :]
    re = mr * ar - mi * ai
    im = mr * ai + mi * ar
    if isinstance(ap, np.ndarray):
        out = np.stack([re, im], axis=-3)
    else:
        import torch
        out = torch.stack([re, im], dim=-3)
    if isinstance(a, Spectrogram):
        return Spectrogram(out, a.params)
    return out


def recombine(a, o):
    """Left/right from mixture ``A`` and predicted difference ``O``."""
    ap, op = _planes(a), _planes(o)
    _check_same_shape(ap, op)
    left = (ap + op) / 2
    right = (ap - op) / 2
    if isinstance(a, Spectrogram):
        return Spectrogram(left, a.params), Spectrogram(right, a.params)
    return left, right


def hilbert_envelope(w) -> np.ndarray:
    """Magnitude of the analytic signal along the last axis (FFT method)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    n = x.shape[-1]
    if n < 16:
        raise LengthError(f"envelope needs at least 16 samples, got {n}")
    spec = np.fft.fft(x, axis=-1)
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1: n // 2] = 2.0
    else:
        h[1: (n + 1) // 2] = 2.0
    return np.abs(np.fft.ifft(spec * h, axis=-1))


def stft_distance(pred, gt) -> float:
    """Sum over channels of the Frobenius norm of the spectrogram error.

    ``pred`` and ``gt`` are (left, right) pairs of ``Spectrogram`` or
    ``[2, F, T]`` arrays.
    """
    total = 0.0
    for p, g in zip(pred, gt, strict=True):
        p, g = _planes(p), _planes(g)
        _check_same_shape(p, g)
        total += float(np.linalg.norm(np.ravel(np.asarray(p, dtype=np.float64) - g)))
    return total


def env_distance(pred: Waveform, gt: Waveform) -> float:
    """Mean over channels of the L2 distance between Hilbert envelopes."""
    if pred.sample_rate != gt.sample_rate:
        raise DataError(f"sample rate mismatch: {pred.sample_rate} vs {gt.sample_rate}")
    if pred.samples.shape != gt.samples.shape:
        raise DataError(f"length/channel mismatch: {pred.samples.shape} vs {gt.samples.shape}")
    diff = hilbert_envelope(pred.samples) - hilbert_envelope(gt.samples)
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def load_wav(path) -> Waveform:
    """Read 16-bit PCM or 32-bit float WAV; channel 0 is left."""
    path = os.fspath(path)
    try:
        rate, data = scipy.io.wavfile.read(path)
    except (ValueError, EOFError, wave.Error) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported sample type {data.dtype}")
    samples = samples.T if samples.ndim == 2 else samples[None, :]
    if samples.shape[0] not in (1, 2):
        raise WavFormatError(f"{path}: {samples.shape[0]} channels (need 1 or 2)")
    try:
        return Waveform(samples, rate)
    except SignalError as exc:
        raise WavFormatError(f"{path}: {exc}") from exc


def save_wav(path, w: Waveform) -> None:
    """Write as 32-bit float WAV."""
    data = np.ascontiguousarray(w.samples.T.astype(np.float32))
    if w.channels == 1:
        data = data[:, 0]
    scipy.io.wavfile.write(os.fspath(path), w.sample_rate, data)
