"""Synthetic "pedal world": a 5-class foot-activity task tied to image location.

Every sample is a pure function of (master seed, split, index). Randomness
comes from counter-based splitmix64 streams, which are easy to reproduce
bit-for-bit in any language. Drivers are disjoint across splits and each
driver carries its own nuisance factors (floor texture, lighting, shoe and
trouser shade), so a classifier that keys on appearance rather than on where
the foot is will not transfer to unseen drivers.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, IntegrityError
from .masks import AttentionMask, GaussianPeak, MaskLibrary

CLASS_NAMES = ("away_from_pedals", "hover_accelerator", "hover_brake", "on_accelerator", "on_brake")
AWAY, HOVER_ACC, HOVER_BRAKE, ON_ACC, ON_BRAKE = range(5)
SPLITS = ("train", "val", "test")

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    """splitmix64 output finaliser."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *keys: int) -> int:
    z = seed & _MASK64
    for k in keys:
        z = mix64(((z ^ (k & _MASK64)) + _GAMMA) & _MASK64)
    return z


class SplitMix64:
    """Counter-based splitmix64 stream; draw k is mix64(seed + (k+1)*gamma)."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.seed + self.counter * _GAMMA)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` uniforms in [0, 1), vectorised; same values as n calls to uniform()."""
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + k * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        return (z >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normals(self, n: int) -> np.ndarray:
        """Box-Muller standard normals."""
        m = (n + 1) // 2
        u = self.uniforms(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        t = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(t), r * np.sin(t)])[:n]

    def shuffle(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


@dataclass(frozen=True)
class Geometry:
    """Scene layout in pixels of the 64x64 reference canvas (pixel centres at k+0.5)."""
    brake_cx: float = 20.0
    brake_top: float = 26.0
    brake_w: float = 14.0
    brake_h: float = 8.0
    accel_cx: float = 45.0
    accel_top: float = 22.0
    accel_w: float = 7.0
    accel_h: float = 14.0
    depression_offsets: tuple[float, ...] = (0.0, 6.0, 12.0)
    foot_rx: float = 7.0
    foot_ry: float = 5.0
    foot_size_jitter: float = 1.0
    hover_gap: tuple[float, float] = (4.0, 8.0)
    on_overlap: tuple[float, float] = (1.0, 3.0)
    lateral_jitter: float = 3.0
    away_box: tuple[float, float, float, float] = (26.0, 52.0, 38.0, 57.0)
    shift: int = 2
    brightness_jitter: float = 0.06
    noise_sigma: float = 0.02
    session_blotches: int = 3
    session_amplitude: float = 0.25


@dataclass(frozen=True)
class DatasetConfig:
    image_size: tuple[int, int, int] = (1, 64, 64)
    class_names: tuple[str, ...] = CLASS_NAMES
    drivers_per_split: tuple[int, int, int] = (7, 1, 3)
    images_per_driver: int = 288
    seed: int = 0
    geometry: Geometry = field(default_factory=Geometry)
    hard_boundary: bool = False

    def __post_init__(self):
        if isinstance(self.geometry, dict):
            g = {k: tuple(v) if isinstance(v, list) else v for k, v in self.geometry.items()}
            object.__setattr__(self, "geometry", Geometry(**g))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "drivers_per_split", tuple(self.drivers_per_split))
        if self.image_size[0] != 1:
            raise ConfigurationError("only grayscale (1-channel) images are generated")
        if len(self.class_names) != 5:
            raise ConfigurationError("the pedal task has exactly 5 classes")

    def driver_ids(self, split: str) -> list[int]:
        i = _split_index(split)
        start = sum(self.drivers_per_split[:i])
        return list(range(start, start + self.drivers_per_split[i]))

    def split_size(self, split: str) -> int:
        return len(self.driver_ids(split)) * self.images_per_driver

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**d)


def _split_index(split: str) -> int:
    try:
        return SPLITS.index(split)
    except ValueError:
        raise ConfigurationError(f"unknown split {split!r}; expected one of {SPLITS}") from None


@dataclass
class Sample:
    image: np.ndarray          # [1, H, W] float32, multiples of 1/255
    label: int
    driver_id: int
    split: str
    index: int
    seed: int
    geometry: dict


# ---------------------------------------------------------------------------
# rendering

@dataclass(frozen=True)
class _Driver:
    base: float
    gratings: tuple
    blotches: tuple
    pedal_shade: float
    shoe_shade: float
    leg_shade: float
    foot_scale: float


def _driver(config: DatasetConfig, driver_id: int) -> _Driver:
    rng = SplitMix64(derive_seed(config.seed, 0xD1, driver_id))
    gratings = tuple((rng.uniform(0.03, 0.08), rng.uniform(0, math.pi), rng.uniform(0.08, 0.4),
                      rng.uniform(0, 2 * math.pi)) for _ in range(3))
    blotches = tuple((rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(3, 7),
                      rng.uniform(-0.25, 0.15)) for _ in range(6))
    return _Driver(
        base=rng.uniform(0.30, 0.50),
        gratings=gratings,
        blotches=blotches,
        pedal_shade=rng.uniform(0.72, 0.90),
        shoe_shade=rng.uniform(0.02, 0.20),
        leg_shade=rng.uniform(0.10, 0.35),
        foot_scale=rng.uniform(-1.0, 1.0),
    )


def _session(config: DatasetConfig, driver_id: int, label: int) -> tuple:
    """Blotches shared by all of one driver's images of one activity.

    Mimics footage where each activity was recorded in its own session
    (different light, clutter on the floor): within a training driver the
    background then predicts the class, across drivers it carries nothing.
    """
    g = config.geometry
    rng = SplitMix64(derive_seed(config.seed, 0x5E, driver_id, label))
    a = g.session_amplitude
    return tuple((rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(4, 9), rng.uniform(-a, a))
                 for _ in range(g.session_blotches))


def place_foot(config: DatasetConfig, label: int, rng: SplitMix64) -> dict:
    """Draw scene geometry for ``label`` (before the global shift)."""
    g = config.geometry
    rx = g.foot_rx + g.foot_size_jitter * rng.uniform(-1, 1)
    ry = g.foot_ry + g.foot_size_jitter * rng.uniform(-1, 1)
    depress = -1
    brake_top, accel_top = g.brake_top, g.accel_top
    if label == AWAY:
        x0, y0, x1, y1 = g.away_box
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
    else:
        on_brake = label in (HOVER_BRAKE, ON_BRAKE)
        pedal_cx = g.brake_cx if on_brake else g.accel_cx
        cx = pedal_cx + rng.uniform(-g.lateral_jitter, g.lateral_jitter)
        if label in (HOVER_ACC, HOVER_BRAKE):
            lo, hi = g.hover_gap
            if config.hard_boundary:
                lo = 0.0
            top = brake_top if on_brake else accel_top
            cy = top - rng.uniform(lo, hi) - ry
        else:
            depress = rng.randint(len(g.depression_offsets))
            d = g.depression_offsets[depress]
            if on_brake:
                brake_top += d
            else:
                accel_top += d
            top = brake_top if on_brake else accel_top
            lo, hi = g.on_overlap
            if config.hard_boundary:
                lo = 0.0
            cy = top + rng.uniform(lo, hi) - ry
    return {"foot_cx": cx, "foot_cy": cy, "foot_rx": rx, "foot_ry": ry,
            "brake_top": brake_top, "accel_top": accel_top, "depression": depress}


def classify_geometry(config: DatasetConfig, geom: dict) -> int:
    """Rule-based label from stored geometry; needs no learning."""
    g = config.geometry
    cx, cy, ry = geom["foot_cx"] - geom["shift_x"], geom["foot_cy"] - geom["shift_y"], geom["foot_ry"]
    db, da = abs(cx - g.brake_cx), abs(cx - g.accel_cx)
    if min(db, da) > g.lateral_jitter + 1e-9 or cy > max(geom["brake_top"], geom["accel_top"]) + g.brake_h:
        return AWAY
    brake = db < da
    top = geom["brake_top"] if brake else geom["accel_top"]
    gap = top - (cy + ry)
    if gap >= 0:
        return HOVER_BRAKE if brake else HOVER_ACC
    return ON_BRAKE if brake else ON_ACC


def _render(config: DatasetConfig, drv: _Driver, geom: dict, rng: SplitMix64, session: tuple = ()) -> np.ndarray:
    _, h, w = config.image_size
    g = config.geometry
    sy, sx = h / 64.0, w / 64.0
    yy = (np.arange(h)[:, None] + 0.5) / sy
    xx = (np.arange(w)[None, :] + 0.5) / sx
    dx, dy = geom["shift_x"], geom["shift_y"]

    img = np.full((h, w), drv.base)
    for amp, theta, freq, phase in drv.gratings:
        img += amp * np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    for bx, by, bs, ba in drv.blotches + session:
        img += ba * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * bs * bs))

    def rect(cx, top, rw, rh, shade):
        m = (np.abs(xx - cx) <= rw / 2) & (yy >= top) & (yy <= top + rh)
        img[m] = shade

    # painter's order: leg, pedals, shoe
    fx, fy = geom["foot_cx"], geom["foot_cy"]
    rx, ry = geom["foot_rx"], geom["foot_ry"]
    leg = (np.abs(xx - fx) <= rx * 0.6) & (yy >= fy)
    img[leg] = drv.leg_shade
    for cx, top, pw, ph in ((g.brake_cx, geom["brake_top"], g.brake_w, g.brake_h),
                            (g.accel_cx, geom["accel_top"], g.accel_w, g.accel_h)):
        rect(cx + dx, 0.0, 2.0, top + dy, drv.pedal_shade * 0.7)       # pedal arm
        rect(cx + dx, top + dy, pw, ph, drv.pedal_shade)
    foot = ((xx - fx) / rx) ** 2 + ((yy - fy) / ry) ** 2 <= 1.0
    img[foot] = drv.shoe_shade

    gain = 1.0 + g.brightness_jitter * rng.uniform(-1, 1)
    offset = g.brightness_jitter * rng.uniform(-1, 1)
    img = img * gain + offset + g.noise_sigma * rng.normals(h * w).reshape(h, w)
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def generate_sample(config: DatasetConfig, split: str, index: int) -> Sample:
    """Render sample ``index`` of ``split``; a pure function of its arguments."""
    n = config.split_size(split)
    if not 0 <= index < n:
        raise ConfigurationError(f"index {index} out of range for {split} split of size {n}")
    seed = derive_seed(config.seed, _split_index(split) + 1, index)
    rng = SplitMix64(seed)
    driver_id = config.driver_ids(split)[index // config.images_per_driver]
    drv = _driver(config, driver_id)
    label = rng.randint(len(config.class_names))
    geom = place_foot(config, label, rng)
    geom["foot_rx"] += config.geometry.foot_size_jitter * drv.foot_scale * 0.5
    shift = config.geometry.shift
    geom["shift_x"] = rng.randint(2 * shift + 1) - shift
    geom["shift_y"] = rng.randint(2 * shift + 1) - shift
    geom["foot_cx"] += geom["shift_x"]
    geom["foot_cy"] += geom["shift_y"]
    pixels = quantize(_render(config, drv, geom, rng, _session(config, driver_id, label)))
    image = (pixels.astype(np.float32) / np.float32(255.0))[None]
    return Sample(image, label, driver_id, split, index, seed, geom)


# ---------------------------------------------------------------------------
# in-memory datasets and on-disk layout

@dataclass
class Dataset:
    images: np.ndarray         # [N, 1, H, W] float32
    labels: np.ndarray         # [N] int64
    drivers: np.ndarray        # [N] int64
    class_names: tuple[str, ...] = CLASS_NAMES
    split: str = ""
    geometry: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield Sample(self.images[i], int(self.labels[i]), int(self.drivers[i]), self.split, i, 0,
                         self.geometry[i] if self.geometry else {})

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)  # an empty list arrives as float
        geom = [self.geometry[i] for i in idx] if self.geometry else []
        return Dataset(self.images[idx], self.labels[idx], self.drivers[idx], self.class_names,
                       self.split, geom)


def _generate_chunk(args) -> list[Sample]:
    config, split, lo, hi = args
    return [generate_sample(config, split, i) for i in range(lo, hi)]


def generate_samples(config: DatasetConfig, split: str, workers: int = 1, count: int | None = None
                     ) -> list[Sample]:
    n = config.split_size(split) if count is None else count
    if workers <= 1:
        return _generate_chunk((config, split, 0, n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [(config, split, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return [s for part in ex.map(_generate_chunk, chunks) for s in part]


def build_dataset(config: DatasetConfig, split: str, workers: int = 1) -> Dataset:
    samples = generate_samples(config, split, workers)
    return Dataset(
        images=np.stack([s.image for s in samples]).astype(np.float32),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        drivers=np.array([s.driver_id for s in samples], dtype=np.int64),
        class_names=config.class_names,
        split=split,
        geometry=[s.geometry for s in samples],
    )


def write_pgm(path, pixels: np.ndarray) -> bytes:
    """Write an 8-bit binary PGM (P5) and return its bytes."""
    h, w = pixels.shape
    data = b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()
    Path(path).write_bytes(data)
    return data


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    # header is four whitespace-separated tokens; exactly one whitespace byte precedes the raster
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise IntegrityError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise IntegrityError(f"{path}: only 8-bit PGM is supported")
    pixels = data[m.end():]
    if len(pixels) != w * h:
        raise IntegrityError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def generate_split(config: DatasetConfig, split: str, root, workers: int = 1) -> dict:
    """Write ``<root>/<split>/<class>/<index>.pgm`` plus ``<root>/<split>/manifest.json``."""
    root = Path(root)
    split_dir = root / split
    for name in config.class_names:
        (split_dir / name).mkdir(parents=True, exist_ok=True)
    samples = generate_samples(config, split, workers)
    digest = hashlib.sha256()
    records = []
    for s in samples:
        rel = f"{config.class_names[s.label]}/{s.index:06d}.pgm"
        data = write_pgm(split_dir / rel, quantize(s.image[0]))
        digest.update(data)
        records.append({"index": s.index, "file": rel, "label": s.label, "driver": s.driver_id,
                        "seed": s.seed, "geometry": s.geometry})
    manifest = {
        "format": "fsatrain-dataset/1",
        "split": split,
        "config": config.to_dict(),
        "counts": {name: sum(r["label"] == c for r in records) for c, name in enumerate(config.class_names)},
        "drivers": {str(d): sum(r["driver"] == d for r in records) for d in config.driver_ids(split)},
        "samples": records,
        "content_sha256": digest.hexdigest(),
    }
    (split_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


def load_dataset(path) -> Dataset:
    """Load a split directory written by :func:`generate_split`, verifying its hash."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise IntegrityError(f"{path}: no manifest.json") from None
    names = tuple(manifest["config"]["class_names"])
    digest = hashlib.sha256()
    images, labels, drivers, geom = [], [], [], []
    for r in manifest["samples"]:
        f = path / r["file"]
        if not f.exists():
            raise IntegrityError(f"{f}: listed in manifest but missing")
        if f.parent.name != names[r["label"]]:
            raise IntegrityError(f"{f}: directory does not match label {names[r['label']]}")
        digest.update(f.read_bytes())
        images.append(read_pgm(f))
        labels.append(r["label"])
        drivers.append(r["driver"])
        geom.append(r["geometry"])
    if digest.hexdigest() != manifest["content_sha256"]:
        raise IntegrityError(f"{path}: image content does not match manifest hash")
    imgs = (np.stack(images).astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(imgs, np.array(labels, dtype=np.int64), np.array(drivers, dtype=np.int64), names,
                   manifest["split"], geom)


def load_image_folder(path, class_names, size: tuple[int, int] | None = None) -> Dataset:
    """Generic ``<path>/<class_name>/*`` loader for real images (grayscale)."""
    from PIL import Image

    path = Path(path)
    images, labels = [], []
    for c, name in enumerate(class_names):
        d = path / name
        if not d.is_dir():
            continue
        for f in sorted(d.iterdir()):
            if f.suffix.lower() not in {".pgm", ".png", ".jpg", ".jpeg", ".bmp"}:
                continue
            im = Image.open(f).convert("L")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            images.append(np.asarray(im, dtype=np.uint8))
            labels.append(c)
    if not images:
        raise IntegrityError(f"{path}: no images found under class subdirectories")
    imgs = (np.stack(images).astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(imgs, np.array(labels, dtype=np.int64), np.full(len(labels), -1, dtype=np.int64),
                   tuple(class_names), path.name)


# ---------------------------------------------------------------------------
# masks matching the generator

def contact_points(config: DatasetConfig) -> dict[int, list[tuple[float, float]]]:
    """Expected foot-centre locations per class, in reference-canvas pixels."""
    g = config.geometry
    hover_dy = (g.hover_gap[0] + g.hover_gap[1]) / 2 + g.foot_ry
    on_dy = (g.on_overlap[0] + g.on_overlap[1]) / 2 - g.foot_ry
    return {
        AWAY: [],
        HOVER_ACC: [(g.accel_cx, g.accel_top - hover_dy)],
        HOVER_BRAKE: [(g.brake_cx, g.brake_top - hover_dy)],
        ON_ACC: [(g.accel_cx, g.accel_top + d + on_dy) for d in g.depression_offsets],
        ON_BRAKE: [(g.brake_cx, g.brake_top + d + on_dy) for d in g.depression_offsets],
    }


def default_mask_library(config: DatasetConfig | None = None, raster: tuple[int, int] = (8, 8),
                         sigma: float = 0.08) -> MaskLibrary:
    """Masks centred where the generator puts the foot for each class.

    away: none; hover classes: one mask made of two neighbouring peaks;
    on classes: one mask per pedal depression offset.
    """
    config = config or DatasetConfig()
    spread = config.geometry.lateral_jitter / 64.0
    masks: list[list[AttentionMask]] = []
    for c, points in contact_points(config).items():
        name = config.class_names[c]
        if c in (HOVER_ACC, HOVER_BRAKE):
            (px, py), = points
            peaks = tuple(GaussianPeak(px / 64.0 + s * spread, py / 64.0, sigma, sigma, 1.0) for s in (-1, 1))
            masks.append([AttentionMask(peaks, f"{name}: foot above pedal")])
        else:
            masks.append([
                AttentionMask((GaussianPeak(px / 64.0, py / 64.0, sigma, sigma, 1.0),),
                              f"{name}: depression {d:g}px")
                for (px, py), d in zip(points, config.geometry.depression_offsets)
            ])
    return MaskLibrary(list(config.class_names), masks, raster)
