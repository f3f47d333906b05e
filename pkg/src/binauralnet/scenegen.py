"""Synthetic binaural scenes.

A scene is a handful of point sources in front of a listener. The stereo
ground truth uses a constant-power pan law with 1/distance attenuation and an
interaural delay on the far ear; the RGB frame and depth map rasterize the
same sources as Gaussian blobs so the visual towers can locate them.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .signal import DEFAULT_STFT, ShapeError, Waveform, save_wav

log = logging.getLogger(__name__)

HEAD_WIDTH = 0.18  # m
SPEED_OF_SOUND = 343.0  # m/s
DELAY_TAPS = 16
FAR_DEPTH = 20.0  # m
BACKGROUND_RGB = (40, 40, 40)
GENERATOR_RGB = {"sine": (230, 80, 60), "noise": (60, 120, 230)}
MANIFEST_VERSION = "1"
SPLITS = ("train", "val", "test")


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    azimuth: float  # degrees, positive = listener's right
    distance: float  # meters
    generator: str  # "sine" | "noise"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not -90.0 <= self.azimuth <= 90.0:
            raise SceneError(f"azimuth {self.azimuth} outside [-90, 90]")
        if not 1.0 <= self.distance <= 10.0:
            raise SceneError(f"distance {self.distance} outside [1, 10]")
        if self.generator not in GENERATOR_RGB:
            raise SceneError(f"unknown generator {self.generator!r}")

    def mirrored(self) -> "SourceSpec":
        return replace(self, azimuth=-self.azimuth)


@dataclass(frozen=True)
class SceneSpec:
    sources: tuple
    duration: float = 0.63
    room_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not 1 <= len(self.sources) <= 3:
            raise SceneError(f"scene needs 1-3 sources, got {len(self.sources)}")
        if self.duration * 1.0 <= 0:
            raise SceneError("duration must be positive")

    def mirrored(self) -> "SceneSpec":
        return replace(self, sources=tuple(s.mirrored() for s in self.sources))

    def with_distance_scale(self, k: float) -> "SceneSpec":
        return replace(self, sources=tuple(replace(s, distance=s.distance * k) for s in self.sources))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sources"] = [asdict(s) for s in self.sources]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            sources=tuple(SourceSpec(**s) for s in d["sources"]),
            duration=d["duration"],
            room_gain=d["room_gain"],
            seed=d["seed"],
        )


# ---------------------------------------------------------------------------
# Audio oracle
# ---------------------------------------------------------------------------


def pan_gains(azimuth: float) -> tuple[float, float]:
    """Constant-power gains ``(cos phi, sin phi)``, phi = (az+90)/180 * pi/2.

    ``sin phi`` is evaluated as ``cos(pi/2 - phi)`` so the two gains are
    bitwise mirror images of each other.
    """
    gl = math.cos((90.0 + azimuth) / 180.0 * (math.pi / 2))
    gr = math.cos((90.0 - azimuth) / 180.0 * (math.pi / 2))
    return gl, gr


def interaural_delay(azimuth: float) -> float:
    """Signed delay in seconds; positive means the left ear lags."""
    return HEAD_WIDTH * math.sin(math.radians(azimuth)) / SPEED_OF_SOUND


def fractional_delay_taps(delay: float, taps: int = DELAY_TAPS) -> tuple[int, np.ndarray]:
    """Blackman-windowed sinc kernel delaying by ``delay`` samples.

    Returns ``(first_lag, h)`` with ``y[n] = sum_j h[j] x[n - first_lag - j]``.
    """
    half = taps // 2
    first = math.floor(delay) - half + 1
    lags = first + np.arange(taps)
    x = lags - delay
    win = 0.42 + 0.5 * np.cos(np.pi * x / half) + 0.08 * np.cos(2 * np.pi * x / half)
    h = np.sinc(x) * win
    return first, h / h.sum()


def fractional_delay(x: np.ndarray, delay: float, taps: int = DELAY_TAPS) -> np.ndarray:
    """Delay by a non-negative number of samples; zeros enter from the left."""
    if delay == 0.0:
        return x.copy()
    first, h = fractional_delay_taps(delay, taps)
    y = np.zeros_like(x)
    n = len(x)
    for j, c in enumerate(h):
        lag = first + j
        if lag >= 0:
            y[lag:] += c * x[: n - lag]
        else:
            y[:lag] += c * x[-lag:]
    return y


def source_signal(src: SourceSpec, num_samples: int, sample_rate: int) -> np.ndarray:
    """Deterministic dry signal for a source."""
    t = np.arange(num_samples) / sample_rate
    p = src.params
    if src.generator == "sine":
        out = np.zeros(num_samples)
        for f, a, ph in zip(p["freqs"], p["amps"], p["phases"]):
            out += a * np.sin(2 * np.pi * f * t + ph)
        return out
    rng = np.random.default_rng(src.seed)
    white = rng.standard_normal(num_samples)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(num_samples, 1.0 / sample_rate)
    spec[(freqs < p["low"]) | (freqs > p["high"])] = 0.0
    band = np.fft.irfft(spec, n=num_samples)
    rms = np.sqrt(np.mean(band ** 2))
    return band * (p["rms"] / rms if rms > 0 else 0.0)


def render_binaural(scene: SceneSpec, sample_rate: int = 16000) -> Waveform:
    """Ground-truth stereo for ``scene`` (channel 0 = left)."""
    n = int(round(scene.duration * sample_rate))
    margin = 2 * DELAY_TAPS + int(math.ceil(HEAD_WIDTH / SPEED_OF_SOUND * sample_rate))
    out = np.zeros((2, n))
    for src in scene.sources:
        dry = source_signal(src, n + 2 * margin, sample_rate)
        gl, gr = pan_gains(src.azimuth)
        scale = scene.room_gain / src.distance
        lag = abs(interaural_delay(src.azimuth)) * sample_rate
        delayed = fractional_delay(dry, lag)
        if src.azimuth > 0:
            left, right = delayed, dry
        else:
            left, right = dry, delayed
        out[0] += gl * scale * left[margin: margin + n]
        out[1] += gr * scale * right[margin: margin + n]
    return Waveform(out, sample_rate)


def mono_mix(stereo: Waveform) -> Waveform:
    """Mono mixture as the channel sum."""
    if stereo.channels != 2:
        raise ShapeError("mono_mix needs a stereo waveform")
    return Waveform(stereo.samples[0] + stereo.samples[1], stereo.sample_rate)


# ---------------------------------------------------------------------------
# Visual rasterization
# ---------------------------------------------------------------------------


def _check_size(size, patch_size):
    h, w = size
    if h % patch_size or w % patch_size:
        raise SceneError(f"image size {h}x{w} not a multiple of patch size {patch_size}")


def _blob_geometry(src: SourceSpec, height: int, width: int, blob_scale: float):
    # Coordinates are measured from the image center so that negating the
    # azimuth reflects the blob exactly.
    xs = (np.arange(width) + 0.5) - width / 2
    ys = (np.arange(height) + 0.5) - height / 2
    cx = (width / 2) * (src.azimuth / 90.0)
    radius = blob_scale * width / src.distance
    d2 = (ys[:, None] ** 2) + (xs[None, :] - cx) ** 2
    return d2, radius


def render_image(scene: SceneSpec, size=(112, 112), patch_size: int = 16,
                 blob_scale: float = 0.1) -> np.ndarray:
    """8-bit RGB frame ``[H, W, 3]``: one Gaussian blob per source."""
    _check_size(size, patch_size)
    h, w = size
    img = np.empty((h, w, 3))
    img[:] = BACKGROUND_RGB
    for src in scene.sources:
        d2, r = _blob_geometry(src, h, w, blob_scale)
        alpha = np.exp(-d2 / (2 * r * r))
        alpha[d2 > (2 * r) ** 2] = 0.0
        color = np.asarray(GENERATOR_RGB[src.generator], dtype=np.float64)
        img = img * (1 - alpha[..., None]) + color * alpha[..., None]
    return np.rint(img).astype(np.uint8)


def render_depth(scene: SceneSpec, size=(112, 112), patch_size: int = 16,
                 blob_scale: float = 0.1) -> np.ndarray:
    """Depth in meters ``[H, W]``; nearest source wins inside blob footprints."""
    _check_size(size, patch_size)
    h, w = size
    depth = np.full((h, w), FAR_DEPTH)
    for src in scene.sources:
        d2, r = _blob_geometry(src, h, w, blob_scale)
        inside = d2 <= (2 * r) ** 2
        depth[inside] = np.minimum(depth[inside], src.distance)
    return depth


def depth_to_png_array(depth: np.ndarray) -> np.ndarray:
    return np.rint(depth * 1000.0).astype(np.uint16)


def save_png_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def save_png_depth(path, depth_m: np.ndarray) -> None:
    Image.fromarray(depth_to_png_array(depth_m)).save(path, format="PNG")


def load_png_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def load_png_depth(path) -> np.ndarray:
    """Depth PNG (millimeters, 16-bit) -> meters."""
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 1000.0


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenConfig:
    sample_rate: int = 16000
    duration: float = 0.63
    image_size: tuple = (112, 112)
    patch_size: int = 16
    min_sources: int = 1
    max_sources: int = 3
    min_azimuth_gap: float = 20.0
    blob_scale: float = 0.1
    sine_f0: tuple = (150.0, 500.0)
    noise_center: tuple = (250.0, 1000.0)
    room_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "sine_f0", tuple(self.sine_f0))
        object.__setattr__(self, "noise_center", tuple(self.noise_center))
        if not 1 <= self.min_sources <= self.max_sources <= 3:
            raise SceneError("need 1 <= min_sources <= max_sources <= 3")
        if self.duration * self.sample_rate < DEFAULT_STFT.window_len:
            raise SceneError("duration shorter than one STFT window")
        _check_size(self.image_size, self.patch_size)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SceneError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` of a dataset seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _random_source(rng: np.random.Generator, cfg: GenConfig, azimuth: float) -> SourceSpec:
    distance = float(np.round(rng.uniform(1.0, 10.0), 3))
    seed = int(rng.integers(0, 2**31 - 1))
    if rng.random() < 0.5:
        f0 = float(rng.uniform(*cfg.sine_f0))
        params = {
            "freqs": [round(f0 * k, 4) for k in (1, 2, 3)],
            "amps": [round(float(a), 4) for a in 0.3 * rng.uniform(0.3, 1.0, 3) / np.arange(1, 4)],
            "phases": [round(float(p), 4) for p in rng.uniform(0, 2 * np.pi, 3)],
        }
        return SourceSpec(azimuth, distance, "sine", params, seed)
    fc = float(rng.uniform(*cfg.noise_center))
    params = {"low": round(fc / math.sqrt(2), 4), "high": round(fc * math.sqrt(2), 4), "rms": 0.15}
    return SourceSpec(azimuth, distance, "noise", params, seed)


def random_scene(cfg: GenConfig, rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    k = int(rng.integers(cfg.min_sources, cfg.max_sources + 1))
    azimuths: list[float] = []
    while len(azimuths) < k:
        az = float(np.round(rng.uniform(-90.0, 90.0), 2))
        if all(abs(az - other) >= cfg.min_azimuth_gap for other in azimuths):
            azimuths.append(az)
    sources = tuple(_random_source(rng, cfg, az) for az in azimuths)
    return SceneSpec(sources, cfg.duration, cfg.room_gain, seed)


def make_sample(cfg: GenConfig, seed: int, index: int) -> SceneSpec:
    return random_scene(cfg, sample_rng(seed, index), seed=seed)


def sample_id(index: int) -> str:
    return f"s{index:06d}"


def write_sample(scene: SceneSpec, cfg: GenConfig, out_dir: Path, sid: str) -> dict:
    stereo = render_binaural(scene, cfg.sample_rate)
    files = {
        "stereo": f"{sid}_stereo.wav",
        "frame": f"{sid}_frame.png",
        "depth": f"{sid}_depth.png",
        "scene": f"{sid}_scene.json",
    }
    try:
        save_wav(out_dir / files["stereo"], stereo)
        save_png_rgb(out_dir / files["frame"],
                     render_image(scene, cfg.image_size, cfg.patch_size, cfg.blob_scale))
        save_png_depth(out_dir / files["depth"],
                       render_depth(scene, cfg.image_size, cfg.patch_size, cfg.blob_scale))
        (out_dir / files["scene"]).write_text(json.dumps(scene.to_dict(), sort_keys=True, indent=1))
    except OSError as exc:
        raise OSError(f"failed writing sample {sid} under {out_dir}: {exc}") from exc
    return files


def make_dataset(cfg: GenConfig, out_dir, counts=(100, 20, 20), seed: int = 0) -> dict:
    """Write a deterministic dataset and return its manifest.

    Sample ``i`` (global index across splits, train first) is generated from
    its own RNG stream, so any sample can be regenerated in isolation.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for split, count in zip(SPLITS, counts, strict=True):
        for _ in range(int(count)):
            sid = sample_id(index)
            scene = make_sample(cfg, seed, index)
            files = write_sample(scene, cfg, out_dir, sid)
            entries.append({"id": sid, "split": split, **files})
            index += 1
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "counts": dict(zip(SPLITS, (int(c) for c in counts))),
        "config": cfg.to_dict(),
        "samples": entries,
    }
    path = out_dir / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    except OSError as exc:
        raise OSError(f"failed writing manifest {path}: {exc}") from exc
    log.info("wrote %d samples to %s", len(entries), out_dir)
    return manifest


def load_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise SceneError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    ids = [e["id"] for e in manifest["samples"]]
    if len(set(ids)) != len(ids):
        raise SceneError(f"{path}: duplicate sample ids")
    for e in manifest["samples"]:
        for key in ("stereo", "frame", "depth", "scene"):
            if not (root / e[key]).is_file():
                raise FileNotFoundError(f"sample {e['id']}: missing {key} file {root / e[key]}")
    return manifest

