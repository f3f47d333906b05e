"""Self-verification: signal invariants against independent oracles plus
finite-difference gradient checks of every differentiable component."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import signal as sig
from .audionet import AudioEncoder, BinauralNet, MaskDecoder, ModelConfig
from .fusion import Align, cosine_attention
from .training import grad_check, module_grad_check
from .vision import Block, TowerConfig

GRAD_TOL = 1e-4
# central-difference step; with He-scale weights round-off stays well below
# 1e-4 relative and steps rarely straddle a (leaky) ReLU kink
FD_EPS = 1e-5
# gradients below this fraction of the largest sampled one are judged on that scale
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<34} {self.value:>11.3e} <= {self.tolerance:<8.1e} "
                f"{self.seconds:6.1f}s  {self.detail}")


# ---------------------------------------------------------------------------
# Signal invariants
# ---------------------------------------------------------------------------


def check_round_trip(num_signals: int = 100, seed: int = 0, params: sig.StftParams = sig.DEFAULT_STFT):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_signals):
        n = int(rng.integers(4 * params.window_len, 16000))
        x = rng.standard_normal(n) * rng.uniform(0.01, 10.0)
        z = sig.stft_frames(x, params)
        y = sig.istft_frames(z, params)
        inner = sig.interior(z.shape[-1], params)
        err = np.linalg.norm(y[inner] - x[inner]) / np.linalg.norm(x[inner])
        worst = max(worst, float(err))
    return worst, f"{num_signals} signals"


def check_mask_oracle(num_cases: int = 20, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_cases):
        f, t = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        a = rng.standard_normal((2, f, t)) * 10
        m = rng.uniform(-1, 1, (2, f, t))
        out = sig.apply_mask(a, m)
        for k in range(f):
            for l in range(t):
                ref = complex(m[0, k, l], m[1, k, l]) * complex(a[0, k, l], a[1, k, l])
                worst = max(worst, abs(complex(out[0, k, l], out[1, k, l]) - ref))
    return worst, f"{num_cases} spectrograms, scalar complex product"


def check_recombination(num_cases: int = 1000, seed: int = 2):
    """Half the cases run in float64 numpy, half through float32 torch."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(num_cases):
        shape = (2, int(rng.integers(1, 33)), int(rng.integers(1, 33)))
        a = rng.standard_normal(shape)
        m = rng.uniform(-1, 1, shape)
        if i % 2:
            a_t = torch.from_numpy(a).float()
            yl, yr = sig.recombine(a_t, sig.apply_mask(a_t, torch.from_numpy(m).float()))
            err = float((yl + yr - a_t).abs().max())
        else:
            yl, yr = sig.recombine(a, sig.apply_mask(a, m))
            err = float(np.abs(yl + yr - a).max())
        worst = max(worst, err)
    return worst, f"{num_cases} cases"


def _cosine_loop(fv: np.ndarray, fa: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    d, h, w = fv.shape
    _, f, t = fa.shape
    out = np.zeros((h, w, f, t))
    for i in range(h):
        for j in range(w):
            u = [float(fv[c, i, j]) for c in range(d)]
            nu = math.sqrt(math.fsum(x * x for x in u))
            for k in range(f):
                for l in range(t):
                    v = [float(fa[c, k, l]) for c in range(d)]
                    nv = math.sqrt(math.fsum(x * x for x in v))
                    out[i, j, k, l] = math.fsum(x * y for x, y in zip(u, v)) / (nu * nv + eps)
    return out


def check_cosine_oracle(num_cases: int = 6, seed: int = 3):
    rng = np.random.default_rng(seed)
    worst, bound = 0.0, 0.0
    for case in range(num_cases):
        d = int(rng.integers(1, 9))
        h, w, f, t = (int(v) for v in rng.integers(1, 5, size=4))
        fv = rng.standard_normal((d, h, w)) * 10.0 ** rng.uniform(-3, 3)
        fa = rng.standard_normal((d, f, t)) * 10.0 ** rng.uniform(-3, 3)
        if case == 0:
            fv[:, 0, 0] = 0.0
            fa[:, 0, 0] = 3.0 * fv[:, -1, -1]
        att = cosine_attention(torch.from_numpy(fv)[None], torch.from_numpy(fa)[None])[0].numpy()
        worst = max(worst, float(np.abs(att - _cosine_loop(fv, fa)).max()))
        bound = max(bound, float(np.abs(att).max()))
    return worst, bound


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def _probe_weights(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=torch.float64)


def grad_cosine(num_coords: int = 100, seed: int = 4) -> float:
    g = torch.Generator().manual_seed(seed)
    fv = torch.randn(2, 6, 3, 3, generator=g, dtype=torch.float64, requires_grad=True)
    fa = torch.randn(2, 6, 4, 5, generator=g, dtype=torch.float64, requires_grad=True)
    r = _probe_weights((2, 3, 3, 4, 5), seed + 1)
    res = grad_check(lambda: (cosine_attention(fv, fa) * r).sum(), [fv, fa], num_coords, eps=FD_EPS, seed=seed, rel_floor=REL_FLOOR,
                     names=["fv", "fa"])
    return res["max_rel_error"]


def grad_align(num_coords: int = 100, seed: int = 5) -> float:
    torch.manual_seed(seed)
    mod = Align(16, 8).double()
    x = torch.randn(2, 16, 3, 3, dtype=torch.float64)
    r = _probe_weights((2, 8, 3, 3), seed)
    return module_grad_check(mod, lambda: (mod(x) * r).sum(), num_coords, eps=FD_EPS, seed=seed, rel_floor=REL_FLOOR)["max_rel_error"]


def _he_init(module: torch.nn.Module, seed: int) -> None:
    """Re-draw weights at He scale; at the default scale the signal decays
    through the stack and finite differences drown in round-off."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, torch.nn.ConvTranspose2d):
                fan_in = m.weight.shape[0] * m.weight[0, 0].numel() / (m.stride[0] * m.stride[1])
            elif isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
                fan_in = m.weight[0].numel()
            else:
                continue
            m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
            if m.bias is not None:
                m.bias.uniform_(-0.1, 0.1, generator=g)


def _toy_spectrogram(cfg: ModelConfig, frames: int, seed: int):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(1, 2, cfg.stft.num_bins, frames, generator=g, dtype=torch.float64)


def grad_encoder(cfg: ModelConfig, num_coords: int = 100, seed: int = 6) -> float:
    torch.manual_seed(seed)
    enc = AudioEncoder(cfg.encoder_widths, cfg.leaky_slope).double()
    x = _toy_spectrogram(cfg, 32, seed)
    with torch.no_grad():
        shape = enc(x)[0].shape
    r = _probe_weights(shape, seed)
    return module_grad_check(enc, lambda: (enc(x)[0] * r).sum(), num_coords, eps=FD_EPS, seed=seed, rel_floor=REL_FLOOR)["max_rel_error"]


def grad_decoder(cfg: ModelConfig, num_coords: int = 100, seed: int = 7) -> float:
    """Deconvolutions with a fixed random attention provider."""
    torch.manual_seed(seed)
    enc = AudioEncoder(cfg.encoder_widths, cfg.leaky_slope).double()
    dec = MaskDecoder(cfg).double()
    _he_init(enc, seed)
    _he_init(dec, seed + 1)
    x = _toy_spectrogram(cfg, 32, seed)
    with torch.no_grad():
        bottleneck, skips = enc(x)
    c = cfg.attention_channels()
    atts = {}

    def provider(layer, feats):
        if c == 0:
            return None
        key = (layer, tuple(feats.shape))
        if key not in atts:
            g = torch.Generator().manual_seed(seed + layer)
            atts[key] = torch.rand(feats.shape[0], c, *feats.shape[2:], generator=g, dtype=torch.float64) * 2 - 1
        return atts[key]

    r = _probe_weights(x.shape, seed)

    def probe():
        return (dec(bottleneck, skips, provider, x.shape[2:])[0] * r).sum()

    return module_grad_check(dec, probe, num_coords, eps=FD_EPS, seed=seed, rel_floor=REL_FLOOR)["max_rel_error"]


def grad_tower_block(tower: TowerConfig, num_coords: int = 100, seed: int = 8) -> float:
    torch.manual_seed(seed)
    block = Block(tower.token_dim, tower.num_heads, tower.mlp_ratio).double()
    for p in block.parameters():
        torch.nn.init.normal_(p, std=0.3)
    x = torch.randn(2, tower.grid[0] * tower.grid[1], tower.token_dim, dtype=torch.float64)
    r = _probe_weights(x.shape, seed)
    return module_grad_check(block, lambda: (block(x) * r).sum(), num_coords, eps=FD_EPS, seed=seed, rel_floor=REL_FLOOR)["max_rel_error"]


def grad_full_model_by_part(cfg: ModelConfig, num_coords: int = 200, seed: int = 9) -> dict:
    """End-to-end check with coordinates split evenly over every submodule.

    Returns ``{submodule: (coords, max_rel_error)}``; stratifying keeps small
    parts such as the alignment layers from being missed by uniform sampling.
    """
    model = BinauralNet(cfg).double()
    _he_init(model, seed)
    h, w = cfg.tower.image_size
    g = torch.Generator().manual_seed(seed)
    mix = _toy_spectrogram(cfg, 20, seed)
    frame = torch.rand(1, 3, h, w, generator=g, dtype=torch.float64)
    depth = torch.rand(1, cfg.tower.input_channels, h, w, generator=g, dtype=torch.float64)
    r = _probe_weights(mix.shape, seed)

    def probe():
        out = model(mix, frame, depth)
        return ((out["left"] - out["right"]) * r).sum()

    parts = [(n, m) for n, m in model.named_children() if any(True for _ in m.parameters())]
    share, extra = divmod(num_coords, len(parts))
    out = {}
    for k, (name, module) in enumerate(parts):
        res = module_grad_check(module, probe, share + (k < extra), eps=FD_EPS, seed=seed + k,
                                rel_floor=REL_FLOOR)
        out[name] = (res["coords"], res["max_rel_error"])
    return out


def grad_full_model(cfg: ModelConfig, num_coords: int = 200, seed: int = 9) -> float:
    """Worst relative error of :func:`grad_full_model_by_part`."""
    return max(err for _, err in grad_full_model_by_part(cfg, num_coords, seed).values())


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def run_checks(quick: bool = False, model_cfg: ModelConfig | None = None) -> list[CheckResult]:
    """Run every check; ``quick`` shrinks case counts for smoke testing."""
    cfg = model_cfg or ModelConfig()
    scale = 10 if quick else 1
    results = []

    (val, detail), secs = _timed(lambda: check_round_trip(max(100 // scale, 2)))
    results.append(CheckResult("istft(stft(x)) interior round trip", val < 1e-4, val, 1e-4, detail, secs))
    (val, detail), secs = _timed(lambda: check_mask_oracle(max(20 // scale, 2)))
    results.append(CheckResult("apply_mask vs complex oracle", val <= 1e-12, val, 1e-12, detail, secs))
    (val, detail), secs = _timed(lambda: check_recombination(max(1000 // scale, 10)))
    results.append(CheckResult("recombination identity", val <= 1e-6, val, 1e-6, detail, secs))
    (val, bound), secs = _timed(lambda: check_cosine_oracle(max(6 // scale, 2)))
    results.append(CheckResult("cosine attention vs loop oracle", val <= 1e-12 and bound <= 1.0, val, 1e-12,
                               f"max |att| = {bound:.6f}", secs))

    coords = 30 if quick else 100
    grad_checks = [
        ("grad cosine_attention", lambda: grad_cosine(coords)),
        ("grad alignment", lambda: grad_align(coords)),
        ("grad encoder convolutions", lambda: grad_encoder(cfg, coords)),
        ("grad decoder deconvolutions", lambda: grad_decoder(cfg, coords)),
        ("grad tower block", lambda: grad_tower_block(cfg.tower, coords)),
        ("grad full model", lambda: grad_full_model(cfg, 40 if quick else 200)),
    ]
    for name, fn in grad_checks:
        val, secs = _timed(fn)
        results.append(CheckResult(name, val < GRAD_TOL, val, GRAD_TOL, "max relative error", secs))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed, {sum(r.seconds for r in results):.1f}s total")
    return "\n".join(lines)
