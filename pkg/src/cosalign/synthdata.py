"""SynthShift: a deterministic two-domain toy segmentation benchmark.

A scene is a background (class 1), a horizontal road band (class 2) and a few
rectangles or circles drawn from classes 3..C. Geometry depends only on the
seed; the target domain is the source rendering passed through a photometric
shift, so class semantics are shared across domains.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import netpbm

MIN_SIZE = 32
MAX_PLACEMENT_TRIES = 64
MIN_VISIBLE_PIXELS = 12


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class DomainShiftSpec:
    hue_degrees: tuple[float, ...] = ()  # per class; missing entries use the last value, empty means 0
    brightness: float = 0.0
    noise_sigma: float = 0.0
    texture_frequency: float = 0.0
    texture_amplitude: float = 0.1

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    def hue_for(self, c: int) -> float:
        if not self.hue_degrees:
            return 0.0
        return self.hue_degrees[min(c - 1, len(self.hue_degrees) - 1)]

    @property
    def is_identity(self) -> bool:
        return (
            not any(self.hue_degrees)
            and self.brightness == 0
            and self.noise_sigma == 0
            and self.texture_frequency == 0
        )

    def to_string(self) -> str:
        hue = ":".join(f"{h:g}" for h in self.hue_degrees) or "0"
        return (
            f"hue={hue},brightness={self.brightness:g},noise={self.noise_sigma:g},"
            f"texture={self.texture_frequency:g},texture_amp={self.texture_amplitude:g}"
        )


# Calibrated so a source-only toy net lands well below its source accuracy on target.
DEFAULT_SHIFT = DomainShiftSpec(
    hue_degrees=(30.0, -25.0, 35.0, -30.0, 25.0),
    brightness=-0.1,
    noise_sigma=0.06,
    texture_frequency=6.0,
    texture_amplitude=0.12,
)
NO_SHIFT = DomainShiftSpec()


def parse_shift(text: str) -> DomainShiftSpec:
    """Parse ``default``, ``none`` or ``key=value,...`` (hue takes ``a:b:c`` per class)."""
    text = text.strip()
    if text in ("", "default"):
        return DEFAULT_SHIFT
    if text == "none":
        return NO_SHIFT
    spec = NO_SHIFT
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"shift entry {item!r} is not key=value")
        key = key.strip()
        if key == "hue":
            spec = replace(spec, hue_degrees=tuple(float(v) for v in value.split(":")))
        elif key == "brightness":
            spec = replace(spec, brightness=float(value))
        elif key == "noise":
            spec = replace(spec, noise_sigma=float(value))
        elif key == "texture":
            spec = replace(spec, texture_frequency=float(value))
        elif key == "texture_amp":
            spec = replace(spec, texture_amplitude=float(value))
        else:
            raise ValueError(f"unknown shift key {key!r}")
    return spec


@dataclass
class Scene:
    image: np.ndarray  # float32 [3,H,W] in [0,1]
    label: np.ndarray  # uint8 [H,W], classes 1..C
    domain: str
    seed: int

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.domain == other.domain
            and self.seed == other.seed
            and np.array_equal(self.label, other.label)
            and self.image.tobytes() == other.image.tobytes()
        )


def class_palette(num_classes: int) -> np.ndarray:
    """Base RGB color per class (row c-1)."""
    colors = []
    for c in range(num_classes):
        hue = (c * 0.618034) % 1.0
        sat = 0.55 + 0.3 * ((c * 7) % 3) / 2
        val = 0.45 + 0.35 * ((c * 5) % 4) / 3
        colors.append(colorsys.hsv_to_rgb(hue, sat, val))
    return np.array(colors, dtype=np.float64)


def hue_rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation about the gray axis of RGB space."""
    if degrees == 0:
        return np.eye(3)
    a = np.deg2rad(degrees)
    cos, sin = np.cos(a), np.sin(a)
    third = 1.0 / 3.0
    root = np.sqrt(third)
    return np.array(
        [
            [cos + (1 - cos) * third, third * (1 - cos) - root * sin, third * (1 - cos) + root * sin],
            [third * (1 - cos) + root * sin, cos + third * (1 - cos), third * (1 - cos) - root * sin],
            [third * (1 - cos) - root * sin, third * (1 - cos) + root * sin, cos + third * (1 - cos)],
        ]
    )


def _layout(rng: np.random.Generator, h: int, w: int, num_classes: int, skip_class: int | None) -> np.ndarray:
    label = np.ones((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    road_h = int(rng.integers(max(4, h // 8), max(5, h // 3)))
    road_top = int(rng.integers(h // 3, h - road_h + 1))
    label[road_top : road_top + road_h] = 2
    n_objects = int(rng.integers(2, 7))  # with the road: 3..7 shapes
    object_classes = list(range(3, num_classes + 1)) or [2]
    for _ in range(n_objects):
        cls = int(rng.choice(object_classes))
        for _attempt in range(MAX_PLACEMENT_TRIES):
            if rng.random() < 0.5:
                rh = int(rng.integers(max(6, h // 10), max(7, h // 3)))
                rw = int(rng.integers(max(6, w // 10), max(7, w // 3)))
                top, left = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
                mask = (yy >= top) & (yy < top + rh) & (xx >= left) & (xx < left + rw)
            else:
                r = int(rng.integers(max(4, h // 16), max(5, h // 6)))
                cy, cx = int(rng.integers(r, h - r)), int(rng.integers(r, w - r))
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            if mask.sum() >= MIN_VISIBLE_PIXELS:
                break
        else:
            raise PlacementError(f"could not place a shape after {MAX_PLACEMENT_TRIES} tries")
        if cls == skip_class:
            continue
        label[mask] = cls
    return label


def _render(rng: np.random.Generator, label: np.ndarray, num_classes: int) -> np.ndarray:
    """Class base colors with per-class stripe texture and smooth shading."""
    h, w = label.shape
    palette = class_palette(num_classes)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    image = palette[label - 1].transpose(2, 0, 1).copy()
    for c in range(1, num_classes + 1):
        m = label == c
        if not m.any():
            continue
        angle = np.pi * c / num_classes
        freq = 3.0 + 2.0 * (c % 3)
        stripes = 0.06 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        image[:, m] += stripes[m]
    shade = 0.08 * (rng.random() - 0.5) + 0.05 * (yy - 0.5)
    image += shade[None]
    return np.clip(image, 0.0, 1.0)


def apply_shift(image: np.ndarray, label: np.ndarray, spec: DomainShiftSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.is_identity:
        return image.copy()
    out = image.copy()
    for c in np.unique(label):
        hue = spec.hue_for(int(c))
        if hue:
            m = label == c
            out[:, m] = hue_rotation_matrix(hue) @ out[:, m]
    out += spec.brightness
    if spec.texture_frequency:
        h, w = label.shape
        yy, xx = np.mgrid[0:h, 0:w]
        phase = rng.random() * 2 * np.pi
        overlay = spec.texture_amplitude * np.sin(2 * np.pi * spec.texture_frequency * (xx + yy) / (h + w) * 2 + phase)
        out += overlay[None]
    if spec.noise_sigma:
        out += rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def generate_scene(
    seed: int,
    domain: str,
    spec: DomainShiftSpec = DEFAULT_SHIFT,
    height: int = 64,
    width: int = 64,
    num_classes: int = 5,
    target_only_class: int | None = None,
) -> Scene:
    """Render scene ``seed``; ``target_only_class`` is never drawn in the source domain."""
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ValueError(f"scene must be at least {MIN_SIZE}x{MIN_SIZE}, got {height}x{width}")
    skip = target_only_class if domain == "source" else None
    label = _layout(np.random.default_rng([seed, 0]), height, width, num_classes, skip)
    image = _render(np.random.default_rng([seed, 1]), label, num_classes)
    if domain == "target":
        image = apply_shift(image, label, spec, np.random.default_rng([seed, 2]))
    return Scene(image.astype(np.float32), label, domain, seed)


def quantize(image: np.ndarray) -> np.ndarray:
    """[3,H,W] float in [0,1] -> [H,W,3] uint8."""
    return np.clip(np.rint(np.asarray(image, np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_scene(scene: Scene, image_path, label_path) -> None:
    netpbm.write(image_path, quantize(scene.image))
    netpbm.write(label_path, scene.label)


def read_scene(image_path, label_path, domain: str = "source", seed: int = 0) -> Scene:
    rgb = netpbm.read(image_path)
    label = netpbm.read(label_path)
    if rgb.ndim != 3:
        raise netpbm.NetpbmError(f"{image_path}: expected a P6 pixmap", 0)
    if label.ndim != 2:
        raise netpbm.NetpbmError(f"{label_path}: expected a P5 graymap", 0)
    if rgb.shape[:2] != label.shape:
        raise ValueError(f"image {rgb.shape[:2]} and label {label.shape} sizes differ")
    image = (rgb.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)).astype(np.float32)
    return Scene(image, label, domain, seed)


# -- dataset on disk --------------------------------------------------------------

TRAIN_MANIFEST = "manifest.txt"
EVAL_MANIFEST = "eval.txt"
INFO_FILE = "dataset.txt"
SOURCE_SEED_BASE = 0
TARGET_SEED_BASE = 100_000
EVAL_SEED_BASE = 200_000


@dataclass(frozen=True)
class ManifestEntry:
    domain: str
    seed: int
    image_path: str
    label_path: str


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.domain} {e.seed} {e.image_path} {e.label_path}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4 or parts[0] not in ("source", "target"):
                raise ValueError(f"{path}:{lineno}: expected '<domain> <seed> <image> <label>'")
            entries.append(ManifestEntry(parts[0], int(parts[1]), parts[2], parts[3]))
    return entries


@dataclass
class DatasetInfo:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    shift: str = DEFAULT_SHIFT.to_string()
    target_only_class: int = 0
    extra: dict = field(default_factory=dict)


def generate_dataset(
    out_dir,
    n_train: int = 200,
    n_eval: int = 50,
    spec: DomainShiftSpec = DEFAULT_SHIFT,
    height: int = 64,
    width: int = 64,
    num_classes: int = 5,
    target_only_class: int | None = None,
) -> Path:
    out = Path(out_dir)
    for sub in ("source", "target", "eval"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    kwargs = dict(spec=spec, height=height, width=width, num_classes=num_classes, target_only_class=target_only_class)

    def emit(sub, domain, seed):
        scene = generate_scene(seed, domain, **kwargs)
        img, lab = f"{sub}/{seed:06d}.ppm", f"{sub}/{seed:06d}_label.pgm"
        write_scene(scene, out / img, out / lab)
        return ManifestEntry(domain, seed, img, lab)

    train = [emit("source", "source", SOURCE_SEED_BASE + i) for i in range(n_train)]
    train += [emit("target", "target", TARGET_SEED_BASE + i) for i in range(n_train)]
    evals = [emit("eval", "target", EVAL_SEED_BASE + i) for i in range(n_eval)]
    write_manifest(out / TRAIN_MANIFEST, train)
    write_manifest(out / EVAL_MANIFEST, evals)
    with open(out / INFO_FILE, "w", encoding="utf-8") as fh:
        fh.write(f"num_classes = {num_classes}\nheight = {height}\nwidth = {width}\n")
        fh.write(f"shift = {spec.to_string()}\ntarget_only_class = {target_only_class or 0}\n")
    return out


def read_dataset_info(data_dir) -> DatasetInfo:
    info = DatasetInfo()
    path = Path(data_dir) / INFO_FILE
    if not path.exists():
        return info
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            key, sep, value = line.partition("=")
            if not sep:
                continue
            key, value = key.strip(), value.strip()
            if key in ("num_classes", "height", "width", "target_only_class"):
                setattr(info, key, int(value))
            elif key == "shift":
                info.shift = value
            else:
                info.extra[key] = value
    return info


def load_split(data_dir, manifest: str, domain: str | None = None) -> list[Scene]:
    data_dir = Path(data_dir)
    scenes = []
    for e in read_manifest(data_dir / manifest):
        if domain is not None and e.domain != domain:
            continue
        scenes.append(read_scene(data_dir / e.image_path, data_dir / e.label_path, e.domain, e.seed))
    return scenes


def dataset_exists(data_dir) -> bool:
    return os.path.exists(Path(data_dir) / TRAIN_MANIFEST)
