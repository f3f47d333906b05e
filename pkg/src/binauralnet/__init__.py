"""Mono-to-binaural spatialization with a mask-predicting audio UNet
fused with image and depth transformer towers through cosine attention."""

from .signal import (
    DEFAULT_STFT,
    Spectrogram,
    StftParams,
    Waveform,
    apply_mask,
    env_distance,
    hilbert_envelope,
    istft,
    recombine,
    stft,
    stft_distance,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_STFT",
    "Spectrogram",
    "StftParams",
    "Waveform",
    "apply_mask",
    "env_distance",
    "hilbert_envelope",
    "istft",
    "recombine",
    "stft",
    "stft_distance",
]
