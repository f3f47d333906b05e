"""Cross-modal cosine attention between visual positions and audio bins.

At every decoder layer the image and depth feature maps are compared with
the current audio feature map: each visual position ``(i, j)`` gets a cosine
similarity with each time-frequency bin ``(k, l)``. The 4-D result is folded
to ``[(h*w), f, t]`` so visual positions become channels, and the image and
depth blocks are stacked (image first) before being handed to the decoder.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F

from .signal import ConfigurationError, ShapeError

EPS = 1e-8


class _CosineAttention(torch.autograd.Function):
    """Cosine similarity of every column of ``fv [B, d, P]`` with every column
    of ``fa [B, d, Q]``; hand-written backward keeps passes over the
    ``[B, P, Q]`` tensor to a minimum."""

    @staticmethod
    def forward(ctx, fv, fa, eps):
        nv = fv.square().sum(1).sqrt()
        na = fa.square().sum(1).sqrt()
        denom = torch.bmm(nv.unsqueeze(2), na.unsqueeze(1)).add_(eps)
        att = torch.bmm(fv.transpose(1, 2), fa).div_(denom)
        ctx.save_for_backward(fv, fa, nv, na, att, denom)
        return att

    @staticmethod
    def backward(ctx, grad):
        fv, fa, nv, na, att, denom = ctx.saved_tensors
        g = grad / denom
        grad_fv = torch.bmm(fa, g.transpose(1, 2))
        grad_fa = torch.bmm(fv, g)
        g.mul_(att)
        # d(att)/d(norm) terms; the norm's subgradient at 0 is taken as 0
        dnv = torch.bmm(g, na.unsqueeze(2)).squeeze(2)
        dna = torch.bmm(nv.unsqueeze(1), g).squeeze(1)
        unit_v = torch.where(nv > 0, 1.0 / nv, torch.zeros_like(nv)).unsqueeze(1) * fv
        unit_a = torch.where(na > 0, 1.0 / na, torch.zeros_like(na)).unsqueeze(1) * fa
        grad_fv -= dnv.unsqueeze(1) * unit_v
        grad_fa -= dna.unsqueeze(1) * unit_a
        return grad_fv, grad_fa, None


def cosine_attention(fv: torch.Tensor, fa: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """``[B, d, h, w]`` x ``[B, d, f, t]`` -> ``[B, h, w, f, t]`` cosine map.

    ``att = <fv, fa> / (|fv| |fa| + eps)``; zero vectors give 0.
    """
    if fv.ndim != 4 or fa.ndim != 4 or fv.shape[:2] != fa.shape[:2]:
        raise ShapeError(f"channel/batch mismatch: {tuple(fv.shape)} vs {tuple(fa.shape)}")
    b, _, h, w = fv.shape
    f, t = fa.shape[2:]
    att = _CosineAttention.apply(fv.flatten(2), fa.flatten(2), eps)
    return att.reshape(b, h, w, f, t)


def reshape_attention(att: torch.Tensor) -> torch.Tensor:
    """``[B, h, w, f, t]`` -> ``[B, h*w, f, t]``; position ``(i, j)`` -> channel ``i*w + j``."""
    b, h, w, f, t = att.shape
    return att.reshape(b, h * w, f, t)


def unreshape_attention(att: torch.Tensor, h: int, w: int) -> torch.Tensor:
    b, c, f, t = att.shape
    if c != h * w:
        raise ShapeError(f"{c} channels cannot fold into a {h}x{w} grid")
    return att.reshape(b, h, w, f, t)


def fuse(img_att, depth_att, use_image: bool = True, use_depth: bool = True):
    """Stack reshaped attention blocks along channels (image, then depth).

    Returns ``None`` when both modalities are disabled.
    """
    blocks = []
    if use_image:
        blocks.append(reshape_attention(img_att))
    if use_depth:
        blocks.append(reshape_attention(depth_att))
    if not blocks:
        return None
    if len(blocks) == 2 and blocks[0].shape[2:] != blocks[1].shape[2:]:
        raise ShapeError("image and depth attention disagree on (f, t)")
    return torch.cat(blocks, dim=1)


class Align(nn.Module):
    """Per-position linear map ``d_src -> d_out`` followed by GELU."""

    def __init__(self, d_src: int, d_out: int):
        super().__init__()
        self.linear = nn.Linear(d_src, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.gelu(self.linear(x.movedim(1, -1))).movedim(-1, 1)


def align(features: torch.Tensor, layer: int, module: Align | None = None) -> torch.Tensor:
    """Channel-align visual features for decoder ``layer`` (1-based).

    Layer 1 is already aligned and must not receive an alignment network.
    """
    if layer == 1:
        if module is not None:
            raise ConfigurationError("decoder layer 1 takes visual features unaligned")
        return features
    if module is None:
        raise ConfigurationError(f"decoder layer {layer} needs an alignment network")
    return module(features)


class CrossModalFusion(nn.Module):
    """Produces the fused attention tensor for each decoder layer.

    ``audio_widths[i-1]`` is the channel width of the decoder feature map
    entering layer ``i``; ``visual_width`` is ``4d``.
    """

    def __init__(self, visual_width: int, audio_widths, use_image: bool = True,
                 use_depth: bool = True, grid=(7, 7)):
        super().__init__()
        audio_widths = list(audio_widths)
        if audio_widths[0] != visual_width:
            raise ConfigurationError(
                f"audio bottleneck width {audio_widths[0]} must equal visual width {visual_width}"
            )
        self.use_image = use_image
        self.use_depth = use_depth
        self.grid = tuple(grid)
        self.num_layers = len(audio_widths)
        self.image_align = nn.ModuleList(
            Align(visual_width, d) for d in audio_widths[1:]) if use_image else None
        self.depth_align = nn.ModuleList(
            Align(visual_width, d) for d in audio_widths[1:]) if use_depth else None

    @property
    def channels(self) -> int:
        h, w = self.grid
        return h * w * (int(self.use_image) + int(self.use_depth))

    def _modality(self, feats, aligners, layer, audio):
        module = None if layer == 1 else aligners[layer - 2]
        return cosine_attention(align(feats, layer, module), audio)

    def forward(self, layer: int, audio: torch.Tensor, f_img=None, f_depth=None):
        if not (self.use_image or self.use_depth):
            return None
        img_att = self._modality(f_img, self.image_align, layer, audio) if self.use_image else None
        depth_att = self._modality(f_depth, self.depth_align, layer, audio) if self.use_depth else None
        return fuse(img_att, depth_att, self.use_image, self.use_depth)
