"""Metric harness, zero-mask baseline, modality ablation and attention export."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import signal as sig
from .audionet import MODALITIES, BinauralNet, ModelConfig, count_parameters
from .data import SceneData

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    dataset: str
    model: str
    modality: str
    seed: int | None
    per_sample: list = field(default_factory=list)
    stft: float = 0.0
    env: float = 0.0
    baseline: dict | None = None

    @classmethod
    def from_samples(cls, dataset, model, modality, seed, per_sample, baseline=None):
        n = len(per_sample)
        stft = math.fsum(s["stft"] for s in per_sample) / n if n else 0.0
        env = math.fsum(s["env"] for s in per_sample) / n if n else 0.0
        return cls(dataset, model, modality, seed, per_sample, stft, env, baseline)

    def recomputed(self) -> tuple[float, float]:
        n = len(self.per_sample)
        return (math.fsum(s["stft"] for s in self.per_sample) / n,
                math.fsum(s["env"] for s in self.per_sample) / n)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def _dataset_id(data: SceneData) -> str:
    return f"{data.root}:{data.split}"


def sample_distances(left, right, mix, mask, params, sample_rate) -> list[dict]:
    """Per-sample STFT/ENV distances for batched float64 planes ``[B, 2, F, T]``."""
    diff = sig.apply_mask(mix, mask)
    pred_l, pred_r = sig.recombine(mix, diff)
    out = []
    for b in range(mix.shape[0]):
        d_stft = sig.stft_distance((pred_l[b], pred_r[b]), (left[b], right[b]))
        pred_w = sig.istft_frames(np.stack([pred_l[b, 0] + 1j * pred_l[b, 1],
                                            pred_r[b, 0] + 1j * pred_r[b, 1]]), params)
        gt_w = sig.istft_frames(np.stack([left[b, 0] + 1j * left[b, 1],
                                          right[b, 0] + 1j * right[b, 1]]), params)
        d_env = sig.env_distance(sig.Waveform(pred_w, sample_rate), sig.Waveform(gt_w, sample_rate))
        out.append({"stft": d_stft, "env": d_env})
    return out


def evaluate_masks(data: SceneData, mask_fn, batch_size: int = 16) -> list[dict]:
    """Run ``mask_fn(batch) -> [B, 2, F, T]`` over ``data`` in canonical id order."""
    order = np.argsort(np.asarray(data.ids))
    results = {}
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        left, right = data.spectrograms(idx)
        mix = left + right
        mask = np.asarray(mask_fn(idx, mix), dtype=np.float64)
        for i, d in zip(idx, sample_distances(left, right, mix, mask, data.params, data.sample_rate)):
            results[data.ids[i]] = {"id": data.ids[i], **d}
    return [results[k] for k in sorted(results)]


def model_mask_fn(model: BinauralNet, data: SceneData, zero_mask: bool = False):
    dtype = next(model.parameters()).dtype
    channels = model.cfg.tower.input_channels

    @torch.no_grad()
    def fn(idx, mix):
        batch = data.batch(idx, dtype=dtype, depth_channels=channels)
        model.eval()
        mask, _ = model.predict_mask(torch.from_numpy(mix).to(dtype), batch["frame"], batch["depth"], zero_mask)
        return mask.double().numpy()

    return fn


def evaluate(model: BinauralNet, data: SceneData, model_id: str = "model", zero_mask: bool = False,
             baseline: dict | None = None) -> EvalReport:
    per_sample = evaluate_masks(data, model_mask_fn(model, data, zero_mask))
    modality = "none" if zero_mask else model.cfg.modality
    return EvalReport.from_samples(_dataset_id(data), model_id, modality, model.cfg.seed, per_sample, baseline)


def baseline_zero_mask(data: SceneData) -> EvalReport:
    """Mono split: both ears receive ``A / 2``."""
    def zeros(idx, mix):
        return np.zeros_like(mix)

    per_sample = evaluate_masks(data, zeros)
    return EvalReport.from_samples(_dataset_id(data), "zero-mask", "none", None, per_sample)


def oracle_report(data: SceneData) -> EvalReport:
    """Ground truth fed back as the prediction; both distances are 0."""
    per_sample = []
    for i in np.argsort(np.asarray(data.ids)):
        left, right = data.spectrograms([i])
        pair = (left[0], right[0])
        w = sig.Waveform(sig.istft_frames(np.stack([p[0] + 1j * p[1] for p in pair]), data.params),
                         data.sample_rate)
        per_sample.append({"id": data.ids[i], "stft": sig.stft_distance(pair, pair),
                           "env": sig.env_distance(w, w)})
    return EvalReport.from_samples(_dataset_id(data), "oracle", "oracle", None, per_sample)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


def tower_parameter_counts(model_cfg: ModelConfig) -> dict:
    """Tower sizes of the image-only and depth-only variants."""
    img = BinauralNet(model_cfg.with_modality("audio+image"))
    dep = BinauralNet(model_cfg.with_modality("audio+depth"))
    return {"image": count_parameters(img.image_tower), "depth": count_parameters(dep.depth_tower)}


def format_table(rows: dict, baseline: EvalReport | None = None) -> str:
    """Aligned text table ``modality | STFT | ENV``."""
    lines = [f"{'Modality':<20} {'STFT':>10} {'ENV':>10}", "-" * 42]
    if baseline is not None:
        lines.append(f"{'zero-mask':<20} {baseline.stft:>10.4f} {baseline.env:>10.4f}")
    for name, (stft, env) in rows.items():
        lines.append(f"{name:<20} {stft:>10.4f} {env:>10.4f}")
    return "\n".join(lines) + "\n"


def finished_runs(out_dir, train_cfg, seeds=(0, 1, 2), model_cfg: ModelConfig | None = None,
                  modalities=tuple(MODALITIES)) -> dict:
    """Map ``(modality, seed)`` to ``model.ckpt`` for variant runs already complete under ``out_dir``.

    A run counts only if its checkpoint loads and records exactly the model
    and training configuration that variant would be trained with.
    """
    from .training import CheckpointFormatError, config_diff, load_checkpoint

    model_cfg = model_cfg or ModelConfig()
    done = {}
    for seed in seeds:
        for modality in modalities:
            path = Path(out_dir) / f"{modality}_seed{seed}" / "model.ckpt"
            if not path.is_file():
                continue
            try:
                ck = load_checkpoint(path)
            except (CheckpointFormatError, KeyError, ValueError):
                continue
            want_model = replace(model_cfg.with_modality(modality), seed=seed)
            want_train = replace(train_cfg, modality=modality, seed=seed)
            if (ck.train_config is not None and ck.step == want_train.steps
                    and not config_diff(want_model.to_dict(), ck.model_config.to_dict())
                    and not config_diff(want_train.to_dict(), ck.train_config.to_dict())):
                done[(modality, seed)] = path
    return done


def run_ablation(data_root, out_dir, train_cfg, seeds=(0, 1, 2), model_cfg: ModelConfig | None = None,
                 modalities=tuple(MODALITIES), reuse: dict | None = None) -> dict:
    """Train every modality variant for every seed and evaluate on the test split.

    Returns ``{"reports": {modality: [EvalReport per seed]}, "median": {...},
    "table": str, "tower_params": {...}}``; also writes the reports and
    ``ablation.txt`` under ``out_dir``. ``reuse`` maps ``(modality, seed)`` to
    an existing checkpoint path so a finished run is not repeated.
    """
    from .training import load_checkpoint, train

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = model_cfg or ModelConfig()
    counts = tower_parameter_counts(model_cfg)
    train_data = SceneData(data_root, "train", model_cfg.stft)
    val_data = SceneData(data_root, "val", model_cfg.stft)
    test = SceneData(data_root, "test", model_cfg.stft)
    base = baseline_zero_mask(test)
    reports: dict = {m: [] for m in modalities}
    for seed in seeds:
        for modality in modalities:
            run_dir = out / f"{modality}_seed{seed}"
            ckpt = (reuse or {}).get((modality, seed))
            if ckpt is None:
                cfg = replace(train_cfg, modality=modality, seed=seed)
                ckpt = train(cfg, data_root, run_dir, model_cfg, train_data=train_data, val_data=val_data)
            model = load_checkpoint(ckpt).build_model()
            rep = evaluate(model, test, model_id=str(ckpt), baseline={"stft": base.stft, "env": base.env})
            run_dir.mkdir(parents=True, exist_ok=True)
            rep.save(run_dir / "report.json")
            reports[modality].append(rep)
            log.info("ablation %s seed %d: stft %.4f env %.4f", modality, seed, rep.stft, rep.env)
    median = {m: (float(np.median([r.stft for r in rs])), float(np.median([r.env for r in rs])))
              for m, rs in reports.items()}
    table = format_table(median, base)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps(
        {"median": median, "baseline": {"stft": base.stft, "env": base.env},
         "per_seed": {m: [[r.stft, r.env] for r in rs] for m, rs in reports.items()},
         "seeds": list(seeds), "tower_params": counts}, indent=1, sort_keys=True))
    return {"reports": reports, "median": median, "table": table, "tower_params": counts, "baseline": base}


# ---------------------------------------------------------------------------
# Attention maps
# ---------------------------------------------------------------------------


def attention_heatmap(block: np.ndarray, grid) -> np.ndarray:
    """Mean over time-frequency of a ``[(h*w), f, t]`` block, min-max scaled to [0, 1].

    A constant map has no range and renders as 0.5.
    """
    h, w = grid
    m = block.reshape(h * w, -1).mean(axis=1).reshape(h, w)
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.full((h, w), 0.5)
    return (m - lo) / (hi - lo)


def center_of_mass_x(heat: np.ndarray) -> float:
    """Horizontal center of mass in ``[0, 1]`` (0 = left edge); 0.5 for an empty map."""
    total = heat.sum()
    if total <= 0:
        return 0.5
    cols = (np.arange(heat.shape[1]) + 0.5) / heat.shape[1]
    return float((heat.sum(axis=0) * cols).sum() / total)


def _upsample(heat: np.ndarray, size) -> np.ndarray:
    ry, rx = size[0] // heat.shape[0], size[1] // heat.shape[1]
    return np.kron(heat, np.ones((ry, rx)))


def _overlay(frame: np.ndarray, heat: np.ndarray) -> np.ndarray:
    color = np.stack([heat, 0.2 * np.ones_like(heat), 1.0 - heat], axis=-1) * 255.0
    return np.rint(0.5 * frame.astype(np.float64) + 0.5 * color).astype(np.uint8)


def attention_maps(model: BinauralNet, data: SceneData, index: int) -> dict:
    """Heatmaps ``{(layer, modality): [h, w]}`` for one sample."""
    left, right = data.spectrograms([index])
    dtype = next(model.parameters()).dtype
    batch = data.batch([index], dtype=dtype, depth_channels=model.cfg.tower.input_channels)
    model.eval()
    with torch.no_grad():
        _, attention = model.predict_mask(torch.from_numpy(left + right).to(dtype), batch["frame"], batch["depth"])
    grid = model.cfg.tower.grid
    hw = grid[0] * grid[1]
    names = [n for n, on in (("image", model.cfg.use_image), ("depth", model.cfg.use_depth)) if on]
    maps = {}
    for layer, fused in enumerate(attention, start=1):
        fused = fused[0].double().numpy()
        for k, name in enumerate(names):
            maps[(layer, name)] = attention_heatmap(fused[k * hw:(k + 1) * hw], grid)
    return maps


def export_attention(model: BinauralNet, data: SceneData, sample_id: str, out_dir) -> dict:
    """Write grayscale and overlay PNGs per decoder layer and modality.

    Returns the written file paths and the center-of-mass diagnostic.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if sample_id not in data.ids:
        raise KeyError(f"sample {sample_id!r} not in split {data.split!r}")
    index = data.ids.index(sample_id)
    frame = data.frames[index]
    files, com = [], {}
    for (layer, name), heat in attention_maps(model, data, index).items():
        big = _upsample(heat, frame.shape[:2])
        gray = out / f"{sample_id}_layer{layer}_{name}.png"
        over = out / f"{sample_id}_layer{layer}_{name}_overlay.png"
        Image.fromarray(np.rint(big * 255).astype(np.uint8), mode="L").save(gray)
        Image.fromarray(_overlay(frame, big), mode="RGB").save(over)
        files += [str(gray), str(over)]
        com[f"layer{layer}_{name}"] = center_of_mass_x(heat)
    scene = data.scene(index)
    info = {"sample": sample_id, "azimuths": [s.azimuth for s in scene.sources],
            "center_of_mass_x": com, "files": files}
    (out / f"{sample_id}_attention.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    log.info("attention center of mass for %s (azimuths %s): %s", sample_id, info["azimuths"], com)
    return info


def localization_diagnostic(model: BinauralNet, data: SceneData, limit: int = 20) -> list[dict]:
    """Center of mass of every heatmap for up to ``limit`` single-source scenes."""
    rows = []
    for i in range(len(data)):
        scene = data.scene(i)
        if len(scene.sources) != 1:
            continue
        maps = attention_maps(model, data, i)
        rows.append({"id": data.ids[i], "azimuth": scene.sources[0].azimuth,
                     "center_of_mass_x": {f"layer{l}_{n}": center_of_mass_x(h) for (l, n), h in maps.items()}})
        log.info("diagnostic %s azimuth %+.1f: %s", data.ids[i], scene.sources[0].azimuth,
                 rows[-1]["center_of_mass_x"])
        if len(rows) == limit:
            break
    return rows
