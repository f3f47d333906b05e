"""Command-line entry point.

Every subcommand starts from one configuration tree::

    {"gen": ..., "dataset": ..., "model": ..., "train": ..., "ablation": ...}

filled with defaults, then merged with ``--config FILE`` (JSON), then with
``--set dotted.key=value`` overrides, then with the subcommand's flags. Unknown
keys are rejected at every stage. The effective tree is echoed into each
output location so a run can be repeated with ``--config <echo>``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import signal as sig
from .audionet import MODALITIES, ModelConfig, spatialize
from .data import DataError, SceneData
from .evaluation import (
    EvalReport,
    baseline_zero_mask,
    evaluate,
    export_attention,
    finished_runs,
    localization_diagnostic,
    run_ablation,
)
from .scenegen import GenConfig, SceneError, load_manifest, load_png_depth, load_png_rgb, make_dataset
from .training import (
    CheckpointFormatError,
    ConfigMismatchError,
    TrainConfig,
    load_checkpoint,
    train,
)

log = logging.getLogger("binauralnet")

ECHO_NAME = "effective_config.json"


class ValidationError(Exception):
    """Bad flag, config key or input file; maps to exit code 1."""


VALIDATION_ERRORS = (ValidationError, sig.SignalError, SceneError, DataError, ConfigMismatchError,
                     CheckpointFormatError, FileNotFoundError, json.JSONDecodeError)


# ---------------------------------------------------------------------------
# Configuration tree
# ---------------------------------------------------------------------------


def default_config() -> dict:
    return {
        "gen": GenConfig().to_dict(),
        "dataset": {"num_train": 100, "num_val": 20, "num_test": 20, "seed": 0},
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "ablation": {"seeds": [0, 1, 2]},
    }


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Deep-merge ``update`` into a copy of ``base``; keys must already exist."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where!r} must be an object")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> ``{"a": {"b": {"c": value}}}``; value parsed as JSON if possible."""
    if "=" not in text:
        raise ValidationError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ValidationError(f"--set: malformed key {key!r}")
    node: dict = {}
    cur = node
    for part in parts[:-1]:
        cur[part] = {}
        cur = cur[part]
    cur[parts[-1]] = value
    return node


def load_config(path: str | None, overrides) -> dict:
    cfg = default_config()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"--config: file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"--config: {p} is not valid JSON: {exc}") from exc
        cfg = merge(cfg, loaded)
    for text in overrides or []:
        cfg = merge(cfg, parse_override(text))
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")


def _require_dir(path: str, flag: str) -> Path:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise ValidationError(f"{flag}: {p} is not a dataset directory (no manifest.json)")
    return p


def _require_file(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{flag}: file not found: {p}")
    return p


def _set_if(cfg: dict, section: str, key: str, value) -> None:
    if value is not None:
        cfg[section][key] = value


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    _set_if(cfg, "dataset", "num_train", args.num_train)
    _set_if(cfg, "dataset", "num_val", args.num_val)
    _set_if(cfg, "dataset", "num_test", args.num_test)
    _set_if(cfg, "dataset", "seed", args.seed)
    ds = cfg["dataset"]
    counts = (ds["num_train"], ds["num_val"], ds["num_test"])
    if any((not isinstance(c, int)) or c < 0 for c in counts):
        raise ValidationError(f"sample counts must be non-negative integers, got {counts}")
    gen = GenConfig.from_dict(cfg["gen"])
    out = Path(args.out)
    make_dataset(gen, out, counts, seed=int(ds["seed"]))
    echo_config(cfg, out / ECHO_NAME)
    print(f"wrote {sum(counts)} samples to {out}")
    return 0


def cmd_train(args, cfg) -> int:
    _set_if(cfg, "train", "modality", args.modality)
    _set_if(cfg, "train", "steps", args.steps)
    _set_if(cfg, "train", "lr", args.lr)
    _set_if(cfg, "train", "batch_size", args.batch)
    _set_if(cfg, "train", "seed", args.seed)
    data = _require_dir(args.data, "--data")
    tcfg, mcfg = train_config(cfg), model_config(cfg)
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = load_checkpoint(_require_file(args.resume, "--resume"),
                                 expected_config=mcfg.with_modality(tcfg.modality))
    echo_config(cfg, out / ECHO_NAME)
    final = train(tcfg, data, out, mcfg, resume=resume)
    print(f"final checkpoint: {final}")
    return 0


def _check_modality(ckpt_cfg: ModelConfig, requested: str | None) -> None:
    if requested is not None and requested != ckpt_cfg.modality:
        raise ValidationError(
            f"--modality {requested!r} does not match the checkpoint's training modality "
            f"{ckpt_cfg.modality!r}")


def cmd_eval(args, cfg) -> int:
    ckpt = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
    data = SceneData(_require_dir(args.data, "--data"), args.split, ckpt.model_config.stft)
    if len(data) == 0:
        raise ValidationError(f"--data: split {args.split!r} is empty")
    model = ckpt.build_model()
    base = baseline_zero_mask(data)
    report = evaluate(model, data, model_id=str(args.ckpt), baseline={"stft": base.stft, "env": base.env})
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    report.save(path)
    echo_config(cfg, path.with_name(path.stem + "." + ECHO_NAME))
    print(f"STFT {report.stft:.6f} (baseline {base.stft:.6f}, ratio {report.stft / base.stft:.4f})")
    print(f"ENV  {report.env:.6f} (baseline {base.env:.6f}, ratio {report.env / base.env:.4f})")
    return 0


def cmd_ablate(args, cfg) -> int:
    _set_if(cfg, "train", "steps", args.steps)
    if args.seed is not None:
        cfg["ablation"]["seeds"] = [args.seed + k for k in range(3)]
    data = _require_dir(args.data, "--data")
    out = Path(args.out)
    echo_config(cfg, out / ECHO_NAME)
    seeds, tcfg, mcfg = tuple(cfg["ablation"]["seeds"]), train_config(cfg), model_config(cfg)
    reuse = {} if args.no_reuse else finished_runs(out, tcfg, seeds, mcfg)
    for modality, seed in sorted(reuse):
        log.info("reusing finished run %s seed %d", modality, seed)
    result = run_ablation(data, out, tcfg, seeds=seeds, model_cfg=mcfg, reuse=reuse)
    print(result["table"], end="")
    return 0


def _read_mono(path: Path, rate: int) -> np.ndarray:
    w = sig.load_wav(path)
    if w.channels != 1:
        raise ValidationError(f"--audio: {path} has {w.channels} channels; a mono file is required")
    if w.sample_rate != rate:
        raise ValidationError(f"--audio: {path} is sampled at {w.sample_rate} Hz, the model expects {rate} Hz")
    return w.samples[0]


def _check_image(img: np.ndarray, size, flag: str, path: Path) -> None:
    if tuple(img.shape[:2]) != tuple(size):
        raise ValidationError(f"{flag}: {path} is {img.shape[1]}x{img.shape[0]}, "
                              f"the model expects {size[1]}x{size[0]}")


def infer_waveform(model, mono: np.ndarray, frame, depth, sample_rate: int) -> np.ndarray:
    """Binauralize ``mono``; returns ``[2, n]`` with the input's length.

    The input is zero-padded by one window on each side (plus up to one hop
    so the frames tile it) so that every original sample lies in the fully
    overlapped interior of the reconstruction.
    """
    params = model.cfg.stft
    n = mono.size
    lead = params.window_len
    tail = params.window_len + (-(n + lead) % params.hop)
    padded = np.concatenate([np.zeros(lead), mono, np.zeros(tail)])
    left, right, _ = spatialize(model, sig.Waveform(padded, sample_rate), frame, depth)
    stereo = sig.istft_frames(np.stack([left.to_complex(), right.to_complex()]), params)
    return stereo[:, lead:lead + n]


def cmd_infer(args, cfg) -> int:
    ckpt = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
    _check_modality(ckpt.model_config, args.modality)
    model = ckpt.build_model()
    mcfg = model.cfg
    rate = args.sample_rate
    mono = _read_mono(_require_file(args.audio, "--audio"), rate)
    frame = depth = None
    needs_frame = mcfg.use_image or (mcfg.use_depth and mcfg.depth_input == "rgb")
    needs_depth = mcfg.use_depth and mcfg.depth_input == "depth_map"
    if needs_frame:
        if args.frame is None:
            raise ValidationError(f"--frame is required for modality {mcfg.modality!r}")
        p = _require_file(args.frame, "--frame")
        frame = load_png_rgb(p)
        _check_image(frame, mcfg.tower.image_size, "--frame", p)
    if needs_depth:
        if args.depth is None:
            raise ValidationError(f"--depth is required for modality {mcfg.modality!r}")
        p = _require_file(args.depth, "--depth")
        depth = load_png_depth(p)
        _check_image(depth, mcfg.tower.image_size, "--depth", p)
    stereo = infer_waveform(model, mono, frame, depth, rate)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    sig.save_wav(out, sig.Waveform(stereo.astype(np.float32).astype(np.float64), rate))
    echo_config(cfg, out.with_name(out.stem + "." + ECHO_NAME))
    print(f"wrote {out} ({stereo.shape[1]} samples, modality {mcfg.modality})")
    return 0


def _find_split(root: Path, sample: str) -> str:
    for e in load_manifest(root)["samples"]:
        if e["id"] == sample:
            return e["split"]
    raise ValidationError(f"--sample: {sample!r} not found in {root}")


def cmd_export_attention(args, cfg) -> int:
    ckpt = load_checkpoint(_require_file(args.ckpt, "--ckpt"))
    model = ckpt.build_model()
    if not (model.cfg.use_image or model.cfg.use_depth):
        raise ValidationError("--ckpt: an audio-only model has no cross-modal attention")
    root = _require_dir(args.data, "--data")
    split = _find_split(root, args.sample)
    data = SceneData(root, split, model.cfg.stft)
    out = Path(args.out)
    info = export_attention(model, data, args.sample, out)
    result = {"export": info}
    if args.diagnostic > 0:
        test = data if split == "test" else SceneData(root, "test", model.cfg.stft)
        result["diagnostic"] = localization_diagnostic(model, test, args.diagnostic)
        (out / "localization_diagnostic.json").write_text(
            json.dumps(result["diagnostic"], indent=1, sort_keys=True))
    echo_config(cfg, out / ECHO_NAME)
    print(f"wrote {len(info['files'])} heatmaps to {out}")
    for row in result.get("diagnostic", []):
        com = ", ".join(f"{k}={v:.3f}" for k, v in sorted(row["center_of_mass_x"].items()))
        print(f"{row['id']} azimuth {row['azimuth']:+7.2f}: {com}")
    return 0


def cmd_verify(args, cfg) -> int:
    from .verify import format_results, run_checks

    results = run_checks(quick=args.quick, model_cfg=model_config(cfg))
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 2


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("--threads", type=int, default=None, help="cap the number of compute threads")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = _Parser(prog="binauralnet", description="Mono-to-binaural spatialization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-val", type=int)
    p.add_argument("--num-test", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--modality", choices=list(MODALITIES))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint against the zero-mask baseline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON report")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and compare all modality variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, help="first of three consecutive seeds")
    p.add_argument("--no-reuse", action="store_true",
                   help="retrain variants even if a matching finished run exists under --out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", parents=[common], help="binauralize a mono WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--audio", required=True, help="mono WAV")
    p.add_argument("--frame", help="RGB PNG")
    p.add_argument("--depth", help="16-bit depth PNG in millimeters")
    p.add_argument("--out", required=True, help="stereo WAV to write")
    p.add_argument("--modality", choices=list(MODALITIES),
                   help="must match the checkpoint (defaults to it)")
    p.add_argument("--sample-rate", type=int, default=16000, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-attention", parents=[common], help="write attention heatmaps for a sample")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", required=True, help="sample id, e.g. s000123")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostic", type=int, default=20,
                   help="log the center-of-mass diagnostic for this many single-source test scenes")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("verify", parents=[common], help="run the self-verification suite")
    p.add_argument("--quick", action="store_true", help="reduced case counts")
    p.set_defaults(func=cmd_verify)
    return parser


def _setup_logging(args) -> None:
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _setup_logging(args)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TypeError, ValueError) as exc:
        # dataclass constructors reject ill-typed config values this way
        print(f"error: invalid configuration or input: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
