"""Loss, training loop, finite-difference gradient checks and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .audionet import MODALITIES, BinauralNet, ModelConfig
from .data import SceneData
from .signal import ConfigurationError, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BNCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class GradCheckError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigMismatchError(ValueError):
    pass


def loss(pred_left, pred_right, left, right) -> torch.Tensor:
    """Squared L2 over both ears' ``[2, F, T]`` planes, averaged over the batch."""
    for p, g in ((pred_left, left), (pred_right, right)):
        if tuple(p.shape) != tuple(g.shape):
            raise ShapeError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
    if pred_left.ndim == 3:
        pred_left, pred_right, left, right = (t[None] for t in (pred_left, pred_right, left, right))
    per_sample = ((pred_left - left) ** 2).sum(dim=(1, 2, 3)) + ((pred_right - right) ** 2).sum(dim=(1, 2, 3))
    return per_sample.mean()


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    modality: str = "audio+image+depth"
    checkpoint_interval: int = 2_000
    val_interval: int = 1_000
    log_interval: int = 50
    val_samples: int = 64

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr < 0:
            raise ConfigurationError("steps/batch_size/lr must be non-negative (batch positive)")
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"unknown modality {self.modality!r}")
        if min(self.checkpoint_interval, self.val_interval, self.log_interval) <= 0:
            raise ConfigurationError("intervals must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(probe, params, num_coords: int | None = None, fraction: float | None = None,
               eps: float = 1e-5, seed: int = 0, names=None, rel_floor: float = 0.0,
               kink_retries: int = 2) -> dict:
    """Compare autograd gradients of ``probe()`` with central differences.

    ``params`` are leaf tensors (ideally float64) that ``probe`` closes over;
    coordinates are drawn uniformly from their concatenation. The error per
    coordinate is ``|fd - an| / max(|fd|, |an|, floor)`` with
    ``floor = max(1e-8, rel_floor * max|an|)``, so gradients far below the
    sampled scale (structural zeros) are judged against that scale instead of
    their own round-off.

    A step that straddles a ReLU-type kink makes the one-sided differences
    disagree; such coordinates are re-measured with a 10x smaller step, up to
    ``kink_retries`` times.
    """
    params = list(params)
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    value = probe()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for name, g in zip(names, grads):
        if not torch.all(torch.isfinite(g)):
            raise GradCheckError(f"non-finite analytic gradient for {name}")
    base = float(value.detach())
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    if num_coords is None:
        num_coords = max(1, int(round((fraction or 1.0) * total)))
    rng = np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=min(num_coords, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    located = []
    for k in flat:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        located.append((which, int(k - offsets[which])))
    analytic = [float(grads[w].reshape(-1)[i]) for w, i in located]
    floor = max(1e-8, rel_floor * max((abs(a) for a in analytic), default=0.0))

    def differences(p, idx, orig, h):
        p[idx] = orig + h
        up = float(probe())
        p[idx] = orig - h
        down = float(probe())
        p[idx] = orig
        return (up - down) / (2 * h), (up - base) / h, (base - down) / h

    worst, records, kinks = 0.0, [], 0
    with torch.no_grad():
        for (which, idx), an in zip(located, analytic):
            p = params[which].view(-1)
            orig = p[idx].item()
            h = eps
            fd, fwd, bwd = differences(p, idx, orig, h)
            for _ in range(kink_retries):
                # smooth: one-sided slopes differ by O(h); a kink: by O(1), and
                # the central difference then errs by about half that gap
                if abs(fwd - bwd) <= 1e-4 * max(abs(fwd), abs(bwd), floor):
                    break
                kinks += 1
                h /= 10
                fd, fwd, bwd = differences(p, idx, orig, h)
            if not (np.isfinite(fd) and np.isfinite(an)):
                raise GradCheckError(f"non-finite gradient at {names[which]}[{idx}]")
            rel = abs(fd - an) / max(abs(fd), abs(an), floor)
            records.append((names[which], idx, an, fd, rel))
            worst = max(worst, rel)
    return {"max_rel_error": worst, "coords": len(records), "records": records,
            "floor": floor, "kink_retries": kinks}


def module_grad_check(module: torch.nn.Module, probe, num_coords=None, fraction=None,
                      eps: float = 1e-5, seed: int = 0, rel_floor: float = 0.0) -> dict:
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    return grad_check(probe, [p for _, p in named], num_coords, fraction, eps, seed,
                      names=[n for n, _ in named], rel_floor=rel_floor)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _flatten_dict(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten_dict(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: dict, b: dict) -> list[str]:
    fa, fb = _flatten_dict(a), _flatten_dict(b)
    diffs = []
    for key in sorted(set(fa) | set(fb)):
        if fa.get(key, "<missing>") != fb.get(key, "<missing>"):
            diffs.append(f"{key}: {fa.get(key, '<missing>')!r} != {fb.get(key, '<missing>')!r}")
    return diffs


def save_checkpoint(path, model: BinauralNet, optimizer: torch.optim.Optimizer | None = None,
                    step: int = 0, train_cfg: TrainConfig | None = None, rng_state: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | float32 LE tensors``."""
    tensors = [(f"model.{n}", p.detach()) for n, p in model.state_dict().items()]
    adam_step = 0
    if optimizer is not None:
        pnames = dict((id(p), n) for n, p in model.named_parameters())
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                adam_step = int(st["step"])
                tensors.append((f"adam.exp_avg.{pnames[id(p)]}", st["exp_avg"]))
                tensors.append((f"adam.exp_avg_sq.{pnames[id(p)]}", st["exp_avg_sq"]))
    header = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "step": int(step),
        "adam_step": adam_step,
        "rng_state": rng_state or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes())
    tmp.replace(path)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    step: int
    adam_step: int
    rng_state: dict
    tensors: dict

    def build_model(self) -> BinauralNet:
        model = BinauralNet(self.model_config)
        state = {k[len("model."):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items()
                 if k.startswith("model.")}
        model.load_state_dict(state, strict=True)
        return model

    def restore_optimizer(self, model: BinauralNet, optimizer: torch.optim.Optimizer) -> None:
        for name, p in model.named_parameters():
            key = f"adam.exp_avg.{name}"
            if key in self.tensors:
                optimizer.state[p] = {
                    "step": torch.tensor(float(self.adam_step)),
                    "exp_avg": torch.from_numpy(self.tensors[key].copy()),
                    "exp_avg_sq": torch.from_numpy(self.tensors[f"adam.exp_avg_sq.{name}"].copy()),
                }


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if data[:n] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file", 0)
    if len(data) < n + 8:
        raise CheckpointFormatError("truncated before header length", len(data))
    (hlen,) = struct.unpack("<Q", data[n:n + 8])
    start = n + 8
    if len(data) < start + hlen:
        raise CheckpointFormatError("truncated header", len(data))
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}", start) from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {header.get('version')!r}", start)
    offset = start + hlen
    tensors = {}
    for desc in header["tensors"]:
        count = int(np.prod(desc["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointFormatError(f"truncated tensor {desc['name']}", len(data))
        tensors[desc["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(desc["shape"])
        offset = end
    if offset != len(data):
        raise CheckpointFormatError(f"{len(data) - offset} trailing bytes", offset)
    if expected_config is not None:
        diffs = config_diff(expected_config.to_dict(), header["model_config"])
        if diffs:
            raise ConfigMismatchError("checkpoint architecture differs: " + "; ".join(diffs))
    tc = header.get("train_config")
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=TrainConfig.from_dict(tc) if tc else None,
        step=header["step"],
        adam_step=header["adam_step"],
        rng_state=header["rng_state"],
        tensors=tensors,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


class BatchSampler:
    """Epoch-wise shuffling; epoch ``e`` uses a permutation seeded by (seed, e)."""

    def __init__(self, n: int, batch_size: int, seed: int, epoch: int = 0, cursor: int = 0):
        if n == 0:
            raise TrainingError("training split is empty")
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self.epoch, self.cursor = epoch, cursor
        self._perm = self._permutation(epoch)

    def _permutation(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self.cursor == self.n:
                self.epoch += 1
                self.cursor = 0
                self._perm = self._permutation(self.epoch)
            take = min(self.batch_size - len(out), self.n - self.cursor)
            out.extend(self._perm[self.cursor:self.cursor + take])
            self.cursor += take
        return np.asarray(out)

    def state(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}


def make_optimizer(model: BinauralNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)


def train(cfg: TrainConfig, data_root, out_dir, model_cfg: ModelConfig | None = None,
          resume: Checkpoint | None = None, train_data: SceneData | None = None,
          val_data: SceneData | None = None, on_step=None) -> Path:
    """Train and return the path of the final checkpoint (``model.ckpt``).

    Writes ``config.json``, ``train_log.jsonl`` and periodic
    ``ckpt_<step>.ckpt`` files under ``out_dir``.
    """
    from .evaluation import evaluate

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_cfg = (model_cfg or ModelConfig()).with_modality(cfg.modality)
    model_cfg = replace(model_cfg, seed=cfg.seed)
    if train_data is None:
        train_data = SceneData(data_root, "train", model_cfg.stft)
    if val_data is None:
        val_data = SceneData(data_root, "val", model_cfg.stft)
    if len(val_data) > cfg.val_samples:
        val_data = SceneData(data_root, "val", model_cfg.stft, ids=val_data.ids[: cfg.val_samples])

    if resume is not None:
        model = resume.build_model()
        optimizer = make_optimizer(model, cfg)
        resume.restore_optimizer(model, optimizer)
        start = resume.step
        sampler = BatchSampler(len(train_data), cfg.batch_size, cfg.seed, **resume.rng_state)
    else:
        model = BinauralNet(model_cfg)
        optimizer = make_optimizer(model, cfg)
        start = 0
        sampler = BatchSampler(len(train_data), cfg.batch_size, cfg.seed)

    (out / "config.json").write_text(json.dumps(
        {"train": cfg.to_dict(), "model": model_cfg.to_dict(), "data": str(data_root)},
        sort_keys=True, indent=1))
    log_path = out / "train_log.jsonl"
    mode = "a" if resume is not None else "w"
    t0 = time.time()
    with open(log_path, mode) as logf:
        for step in range(start + 1, cfg.steps + 1):
            idx = sampler.next()
            batch = train_data.batch(idx, depth_channels=model_cfg.tower.input_channels)
            model.train()
            outputs = model(batch["mix"], batch["frame"], batch["depth"])
            value = loss(outputs["left"], outputs["right"], batch["left"], batch["right"])
            if not torch.isfinite(value):
                with torch.no_grad():
                    bad = [i for k, i in enumerate(batch["ids"])
                           if not torch.isfinite(loss(outputs["left"][k], outputs["right"][k],
                                                      batch["left"][k], batch["right"][k]))]
                raise TrainingError(f"non-finite loss at step {step}; offending sample ids {bad or batch['ids']}")
            optimizer.zero_grad(set_to_none=True)
            value.backward()
            optimizer.step()
            loss_value = value.item()
            if on_step is not None:
                on_step(step, loss_value)
            record = None
            if step % cfg.val_interval == 0 and len(val_data):
                report = evaluate(model, val_data)
                record = {"step": step, "loss": loss_value,
                          "val_stft": report.stft, "val_env": report.env}
            elif step % cfg.log_interval == 0:
                record = {"step": step, "loss": loss_value, "val_stft": None, "val_env": None}
            if record is not None:
                logf.write(json.dumps(record) + "\n")
                logf.flush()
                log.info("step %d loss %.4f (%.1fs)", step, record["loss"], time.time() - t0)
            if step % cfg.checkpoint_interval == 0:
                save_checkpoint(out / f"ckpt_{step:06d}.ckpt", model, optimizer, step, cfg, sampler.state())
    final = out / "model.ckpt"
    save_checkpoint(final, model, optimizer, max(cfg.steps, start), cfg, sampler.state())
    return final
