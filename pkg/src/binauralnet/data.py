"""In-memory view of one split of a generated dataset."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from . import signal as sig
from .audionet import depth_to_tensor, frame_to_tensor
from .scenegen import SceneSpec, load_manifest, load_png_depth, load_png_rgb


class DataError(ValueError):
    pass


class SceneData:
    """Waveforms, frames and depth maps for a split, indexed by position."""

    def __init__(self, root, split: str = "train", stft_params: sig.StftParams = sig.DEFAULT_STFT,
                 ids=None):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.split = split
        self.params = stft_params
        entries = [e for e in self.manifest["samples"] if e["split"] == split]
        if ids is not None:
            wanted = set(ids)
            entries = [e for e in entries if e["id"] in wanted]
        self.entries = sorted(entries, key=lambda e: e["id"])
        self.ids = [e["id"] for e in self.entries]
        stereo, frames, depths = [], [], []
        rate = None
        for e in self.entries:
            try:
                w = sig.load_wav(self.root / e["stereo"])
                frames.append(load_png_rgb(self.root / e["frame"]))
                depths.append(load_png_depth(self.root / e["depth"]))
            except (OSError, ValueError) as exc:
                raise DataError(f"sample {e['id']}: {exc}") from exc
            if w.channels != 2:
                raise DataError(f"sample {e['id']}: stereo file has {w.channels} channel(s)")
            if rate is not None and w.sample_rate != rate:
                raise DataError(f"sample {e['id']}: sample rate {w.sample_rate} != {rate}")
            rate = w.sample_rate
            stereo.append(w.samples)
        self.sample_rate = rate
        if stereo and len({s.shape for s in stereo}) != 1:
            raise DataError("samples in a split must share one duration")
        self.stereo = np.stack(stereo) if stereo else np.zeros((0, 2, 0))
        self.frames = np.stack(frames) if frames else np.zeros((0, 0, 0, 3), np.uint8)
        self.depths = np.stack(depths) if depths else np.zeros((0, 0, 0))

    def __len__(self) -> int:
        return len(self.ids)

    def scene(self, i: int) -> SceneSpec:
        return SceneSpec.from_dict(json.loads((self.root / self.entries[i]["scene"]).read_text()))

    def spectrograms(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Left and right planes ``[B, 2, F, T]`` (float64) for samples ``idx``."""
        z = sig.stft_frames(self.stereo[np.asarray(idx)], self.params)
        planes = np.stack([z.real, z.imag], axis=2)
        return planes[:, 0], planes[:, 1]

    def batch(self, idx, dtype=torch.float32, depth_channels: int = 3) -> dict:
        idx = np.asarray(idx)
        left, right = self.spectrograms(idx)
        return {
            "ids": [self.ids[i] for i in idx],
            "left": torch.from_numpy(left).to(dtype),
            "right": torch.from_numpy(right).to(dtype),
            "mix": torch.from_numpy(left + right).to(dtype),
            "frame": torch.stack([frame_to_tensor(self.frames[i]) for i in idx]).to(dtype),
            "depth": torch.stack([depth_to_tensor(self.depths[i], depth_channels) for i in idx]).to(dtype),
        }
