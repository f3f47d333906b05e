"""Patch-transformer feature tower with multi-layer taps.

Tokens from several intermediate blocks are reshaped back onto the patch
grid, projected by per-tap 1x1 convolutions to ``d`` channels each and
concatenated, giving a ``[4d, h, w]`` feature map.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .signal import ShapeError


@dataclass(frozen=True)
class TowerConfig:
    input_channels: int = 3
    image_size: tuple = (112, 112)
    patch_size: int = 16
    token_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 4
    tap_layers: tuple = (1, 2, 3, 4)
    tap_dim: int = 16
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        if len(self.tap_layers) != 4:
            raise ShapeError(f"exactly 4 tap layers required, got {self.tap_layers}")
        if list(self.tap_layers) != sorted(self.tap_layers) or not (
            1 <= self.tap_layers[0] and self.tap_layers[-1] <= self.num_blocks
        ):
            raise ShapeError(f"tap layers {self.tap_layers} must be sorted within 1..{self.num_blocks}")
        if self.token_dim % self.num_heads:
            raise ShapeError("token_dim must be divisible by num_heads")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(f"image size {h}x{w} not divisible by patch {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def out_channels(self) -> int:
        return 4 * self.tap_dim

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class Block(nn.Module):
    """Pre-norm transformer block: MHSA + GELU MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def attention(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        weights = torch.softmax(q @ k.transpose(-2, -1) * (c // self.heads) ** -0.5, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), weights

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        a, weights = self.attention(self.norm1(x))
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return (x, weights) if return_weights else x


class VisionTower(nn.Module):
    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.cfg = cfg
        h, w = cfg.grid
        self.embed = nn.Linear(cfg.input_channels * cfg.patch_size ** 2, cfg.token_dim)
        self.pos = nn.Parameter(torch.zeros(h * w, cfg.token_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.token_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks)
        )
        self.taps = nn.ModuleList(nn.Conv2d(cfg.token_dim, cfg.tap_dim, 1) for _ in range(4))
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.pos, std=0.02)

    def patchify(self, img: torch.Tensor) -> torch.Tensor:
        """``[B, C, H, W]`` -> ``[B, h*w, C*p*p]``, patches in row-major grid order."""
        b, c, hh, ww = img.shape
        p = self.cfg.patch_size
        if c != self.cfg.input_channels:
            raise ShapeError(f"expected {self.cfg.input_channels} channels, got {c}")
        if hh % p or ww % p:
            raise ShapeError(f"image {hh}x{ww} not divisible by patch {p}")
        x = img.reshape(b, c, hh // p, p, ww // p, p)
        return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (hh // p) * (ww // p), c * p * p)

    def patch_embed(self, img: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(self.patchify(img))
        if tokens.shape[1] != self.pos.shape[0]:
            raise ShapeError(f"{tokens.shape[1]} patches, positional table has {self.pos.shape[0]}")
        return tokens + self.pos

    def tower_forward(self, tokens: torch.Tensor, return_weights: bool = False):
        """Run all blocks; return token tensors captured after each tap layer."""
        if tokens.shape[-1] != self.cfg.token_dim:
            raise ShapeError(f"token width {tokens.shape[-1]} != {self.cfg.token_dim}")
        taps, weights = [], []
        x = tokens
        for idx, block in enumerate(self.blocks, start=1):
            x, wts = block(x, return_weights=True)
            weights.append(wts)
            if idx in self.cfg.tap_layers:
                taps.append(x)
        return (taps, weights) if return_weights else taps

    def reassemble(self, taps) -> torch.Tensor:
        if len(taps) != 4:
            raise ShapeError(f"reassemble needs 4 taps, got {len(taps)}")
        h, w = self.cfg.grid
        maps = []
        for tok, conv in zip(taps, self.taps):
            grid = tok.transpose(1, 2).reshape(tok.shape[0], self.cfg.token_dim, h, w)
            maps.append(conv(grid))
        return torch.cat(maps, dim=1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.reassemble(self.tower_forward(self.patch_embed(img)))
