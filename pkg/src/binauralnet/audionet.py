"""Audio UNet: spectrogram encoder and mask decoder with fusion hooks.

The mixture spectrogram ``A`` (real/imag planes) is encoded by strided
convolutions. The decoder upsamples with transposed convolutions; before each
layer the current features are concatenated with the fused cross-modal
attention and, from the second layer on, the matching encoder activation.
The final ``tanh`` yields a complex mask ``M`` in ``[-1, 1]``; the predicted
difference is ``M * A`` and the two ears are ``(A +/- M*A) / 2``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import signal as sig
from .fusion import CrossModalFusion
from .scenegen import FAR_DEPTH
from .signal import ConfigurationError, ShapeError, StftParams
from .vision import TowerConfig, VisionTower

MODALITIES = {
    "audio": (False, False),
    "audio+image": (True, False),
    "audio+depth": (False, True),
    "audio+image+depth": (True, True),
}


def modality_name(use_image: bool, use_depth: bool) -> str:
    for name, flags in MODALITIES.items():
        if flags == (use_image, use_depth):
            return name
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ModelConfig:
    stft: StftParams = field(default_factory=StftParams)
    encoder_widths: tuple = (8, 16, 32, 64, 64)
    leaky_slope: float = 0.2
    norm: bool = False
    time_multiple: int = 32
    tower: TowerConfig = field(default_factory=TowerConfig)
    use_image: bool = True
    use_depth: bool = True
    depth_input: str = "depth_map"  # or "rgb": feed the frame to both towers
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        if any(w <= 0 for w in self.encoder_widths):
            raise ConfigurationError("encoder widths must be positive")
        if self.encoder_widths[-1] != self.tower.out_channels:
            raise ConfigurationError(
                f"audio bottleneck width {self.encoder_widths[-1]} must equal "
                f"4*tap_dim = {self.tower.out_channels}"
            )
        if self.depth_input not in ("depth_map", "rgb"):
            raise ConfigurationError(f"unknown depth_input {self.depth_input!r}")
        if self.time_multiple % (2 ** len(self.encoder_widths)):
            raise ConfigurationError("time_multiple must be divisible by 2**num_layers")

    @property
    def modality(self) -> str:
        return modality_name(self.use_image, self.use_depth)

    @property
    def decoder_out_widths(self) -> list[int]:
        return list(self.encoder_widths[-2::-1]) + [2]

    @property
    def decoder_feature_widths(self) -> list[int]:
        """Width of the decoder feature map entering each layer."""
        return [self.encoder_widths[-1]] + self.decoder_out_widths[:-1]

    def attention_channels(self) -> int:
        h, w = self.tower.grid
        return h * w * (int(self.use_image) + int(self.use_depth))

    def decoder_in_widths(self) -> list[int]:
        skips = [0] + list(self.encoder_widths[-2::-1])
        return [d + self.attention_channels() + s
                for d, s in zip(self.decoder_feature_widths, skips)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["stft"] = self.stft.to_dict()
        d["tower"] = self.tower.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        if "stft" in d:
            d["stft"] = StftParams(**d["stft"])
        if "tower" in d:
            d["tower"] = TowerConfig(**d["tower"])
        return cls(**d)

    def with_modality(self, name: str) -> "ModelConfig":
        if name not in MODALITIES:
            raise ConfigurationError(f"unknown modality {name!r}; choose from {list(MODALITIES)}")
        use_image, use_depth = MODALITIES[name]
        return replace(self, use_image=use_image, use_depth=use_depth)


def _norm(width: int, enabled: bool) -> nn.Module:
    return nn.InstanceNorm2d(width, affine=True) if enabled else nn.Identity()


class AudioEncoder(nn.Module):
    def __init__(self, widths, slope: float = 0.2, norm: bool = False):
        super().__init__()
        self.slope = slope
        chans = [2] + list(widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 4, 2, 1) for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.norms = nn.ModuleList(_norm(c, norm) for c in widths)

    def forward(self, x: torch.Tensor):
        """Return ``(bottleneck, activations)``; the last activation is the bottleneck."""
        if x.shape[1] != 2:
            raise ShapeError(f"encoder expects 2 input planes, got {x.shape[1]}")
        skips = []
        for conv, norm in zip(self.convs, self.norms):
            x = F.leaky_relu(norm(conv(x)), self.slope)
            skips.append(x)
        return x, skips


class MaskDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.in_widths = cfg.decoder_in_widths()
        self.out_widths = cfg.decoder_out_widths
        self.deconvs = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, 4, 2, 1) for cin, cout in zip(self.in_widths, self.out_widths)
        )
        self.norms = nn.ModuleList(_norm(c, cfg.norm) for c in self.out_widths[:-1])

    def forward(self, bottleneck, skips, provider, out_size, zero_mask: bool = False):
        """Decode to a ``[B, 2, F, T]`` mask.

        ``provider(layer, features)`` returns the fused attention for the
        current decoder features (or ``None``). ``skips`` are the encoder
        activations, shallowest first, bottleneck last.
        """
        x = bottleneck
        attention = []
        n = len(self.deconvs)
        for i, deconv in enumerate(self.deconvs, start=1):
            parts = [x]
            att = provider(i, x)
            if att is not None:
                attention.append(att)
                parts.append(att)
            if i >= 2:
                parts.append(skips[n - i])
            x = torch.cat(parts, dim=1)
            if x.shape[1] != self.in_widths[i - 1]:
                raise ShapeError(f"decoder layer {i}: width {x.shape[1]} != declared {self.in_widths[i - 1]}")
            target = skips[n - i - 1].shape[2:] if i < n else out_size
            x = deconv(x, output_size=list(target))
            if i < n:
                x = F.relu(self.norms[i - 1](x))
        mask = torch.tanh(x)
        if zero_mask:
            mask = torch.zeros_like(mask)
        return mask, attention


def frame_to_tensor(frame: np.ndarray) -> torch.Tensor:
    """uint8 ``[H, W, 3]`` -> float ``[3, H, W]`` in ``[0, 1]``."""
    return torch.from_numpy(np.ascontiguousarray(frame.transpose(2, 0, 1), dtype=np.float32) / 255.0)


def depth_to_tensor(depth_m: np.ndarray, channels: int = 3) -> torch.Tensor:
    """Depth in meters ``[H, W]`` -> ``[channels, H, W]`` scaled by the far plane."""
    d = torch.from_numpy(np.asarray(depth_m, dtype=np.float32) / FAR_DEPTH)
    return d.unsqueeze(0).expand(channels, -1, -1).contiguous()


class BinauralNet(nn.Module):
    """Mask-predicting UNet fused with image and depth transformer towers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        # every submodule draws from its own stream so that ablation variants
        # share the initialization of the parts they have in common
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed * 1000 + 1)
            self.encoder = AudioEncoder(cfg.encoder_widths, cfg.leaky_slope, cfg.norm)
            torch.manual_seed(cfg.seed * 1000 + 2)
            self.decoder = MaskDecoder(cfg)
            torch.manual_seed(cfg.seed * 1000 + 3)
            self.image_tower = VisionTower(cfg.tower) if cfg.use_image else None
            torch.manual_seed(cfg.seed * 1000 + 4)
            self.depth_tower = VisionTower(cfg.tower) if cfg.use_depth else None
            torch.manual_seed(cfg.seed * 1000 + 5)
            self.fusion = CrossModalFusion(
                cfg.tower.out_channels, cfg.decoder_feature_widths,
                cfg.use_image, cfg.use_depth, cfg.tower.grid,
            )

    def visual_features(self, frame, depth):
        f_img = self.image_tower(frame) if self.image_tower is not None else None
        if self.depth_tower is None:
            f_depth = None
        else:
            f_depth = self.depth_tower(frame if self.cfg.depth_input == "rgb" else depth)
        return f_img, f_depth

    def predict_mask(self, mix, frame=None, depth=None, zero_mask: bool = False):
        """Mask ``[B, 2, F, T]`` for mixture planes ``mix`` plus the fused attention per layer."""
        if mix.ndim != 4 or mix.shape[1] != 2:
            raise ShapeError(f"mixture must be [B, 2, F, T], got {tuple(mix.shape)}")
        num_frames = mix.shape[-1]
        pad = (-num_frames) % self.cfg.time_multiple
        x = F.pad(mix, (0, pad))
        bottleneck, skips = self.encoder(x)
        f_img, f_depth = self.visual_features(frame, depth)

        def provider(layer, audio):
            return self.fusion(layer, audio, f_img, f_depth)

        mask, attention = self.decoder(bottleneck, skips, provider, x.shape[2:], zero_mask)
        return mask[..., :num_frames], attention

    def forward(self, mix, frame=None, depth=None, zero_mask: bool = False):
        mask, attention = self.predict_mask(mix, frame, depth, zero_mask)
        diff = sig.apply_mask(mix, mask)
        left, right = sig.recombine(mix, diff)
        return {"left": left, "right": right, "mask": mask, "diff": diff, "attention": attention}


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def prepare_visual(model: BinauralNet, frame: np.ndarray | None, depth_m: np.ndarray | None):
    """Numpy frame/depth -> batched tensors in the model's dtype."""
    dtype = next(model.parameters()).dtype
    ft = frame_to_tensor(frame)[None].to(dtype) if frame is not None else None
    dt = depth_to_tensor(depth_m, model.cfg.tower.input_channels)[None].to(dtype) if depth_m is not None else None
    if model.cfg.use_image and ft is None:
        raise ConfigurationError("model uses the image modality but no frame was given")
    if model.cfg.use_depth and model.cfg.depth_input == "depth_map" and dt is None:
        raise ConfigurationError("model uses the depth modality but no depth map was given")
    if model.cfg.use_depth and model.cfg.depth_input == "rgb" and ft is None:
        raise ConfigurationError("depth tower in rgb mode needs the frame")
    return ft, dt


@torch.no_grad()
def spatialize(model: BinauralNet, mono: sig.Waveform, frame=None, depth_m=None,
               zero_mask: bool = False):
    """Binauralize a mono waveform.

    Returns ``(left, right, diagnostics)`` where ``left``/``right`` are
    ``Spectrogram`` objects (float64) and diagnostics holds the mask and the
    per-layer fused attention maps.
    """
    params = model.cfg.stft
    a = sig.stft(mono, params)
    dtype = next(model.parameters()).dtype
    mix = torch.from_numpy(a.planes).to(dtype)[None]
    ft, dt = prepare_visual(model, frame, depth_m)
    mask, attention = model.predict_mask(mix, ft, dt, zero_mask)
    m = sig.Spectrogram(mask[0].double().numpy(), params)
    left, right = sig.recombine(a, sig.apply_mask(a, m))
    return left, right, {"mask": m, "attention": [t[0].double().numpy() for t in attention]}
