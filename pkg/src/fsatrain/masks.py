"""Per-class spatial attention masks built from 2-D Gaussian peaks.

Coordinates are normalised to the unit square and sampled at pixel centres,
so a library is independent of the raster it is eventually drawn at. A
mask with several peaks is their pixelwise maximum; a class's masks are
composited the same way.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .errors import ConfigurationError, ValidationError


@dataclass(frozen=True)
class GaussianPeak:
    cx: float
    cy: float
    sigma_x: float
    sigma_y: float
    amplitude: float = 1.0

    def problems(self) -> list[str]:
        out = []
        for name in ("cx", "cy", "sigma_x", "sigma_y", "amplitude"):
            if not math.isfinite(getattr(self, name)):
                out.append(f"{name} is not finite")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            out.append(f"centre ({self.cx}, {self.cy}) outside the unit square")
        if not (self.sigma_x > 0 and self.sigma_y > 0):
            out.append(f"sigmas must be positive, got ({self.sigma_x}, {self.sigma_y})")
        if not (0.0 < self.amplitude <= 1.0):
            out.append(f"amplitude must be in (0, 1], got {self.amplitude}")
        return out


@dataclass(frozen=True)
class AttentionMask:
    peaks: tuple[GaussianPeak, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "peaks", tuple(self.peaks))


@dataclass
class MaskLibrary:
    """Masks per class (a class may have none) plus the raster resolution."""
    class_names: list[str]
    masks: list[list[AttentionMask]]
    raster: tuple[int, int] = (8, 8)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.raster = (int(self.raster[0]), int(self.raster[1]))
        if len(self.masks) != len(self.class_names):
            raise ValidationError(
                f"{len(self.class_names)} class names but {len(self.masks)} mask lists", "classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def counts(self) -> list[int]:
        return [len(m) for m in self.masks]

    def rasters(self, cls: int) -> np.ndarray:
        """All masks of class ``cls`` rasterised: [N_C, h, w] float64."""
        if cls not in self._cache:
            h, w = self.raster
            maps = [rasterize(m, h, w) for m in self.masks[cls]]
            self._cache[cls] = np.stack(maps) if maps else np.zeros((0, h, w))
        return self._cache[cls]

    def composite(self, cls: int) -> np.ndarray:
        return composite(list(self.rasters(cls)))


def _check_peaks(mask: AttentionMask, where: str = "mask") -> None:
    if not mask.peaks:
        raise ValidationError("mask has no peaks", f"{where}.peaks")
    for i, p in enumerate(mask.peaks):
        problems = p.problems()
        if problems:
            raise ValidationError("; ".join(problems) + f" ({p})", f"{where}.peaks[{i}]")


def rasterize(mask: AttentionMask, hc: int, wc: int) -> np.ndarray:
    """Draw ``mask`` on an ``hc`` x ``wc`` grid; values lie in [0, 1].

    Pixel (r, c) samples x = (c + 0.5) / wc, y = (r + 0.5) / hc; each peak
    contributes amplitude * exp(-((x-cx)^2/(2 sx^2) + (y-cy)^2/(2 sy^2)))
    and peaks combine by pixelwise maximum.
    """
    if hc < 1 or wc < 1:
        raise ConfigurationError(f"raster size must be >= 1, got {hc}x{wc}")
    _check_peaks(mask)
    x = (np.arange(wc) + 0.5) / wc
    y = (np.arange(hc) + 0.5) / hc
    # libm exp rather than numpy's SIMD exp: rasters are identical on every CPU
    exp = np.vectorize(math.exp, otypes=[np.float64])
    out = np.zeros((hc, wc))
    for p in mask.peaks:
        dx, dy = x[None, :] - p.cx, y[:, None] - p.cy
        # products rather than ** 2, which can route scalars through libm pow
        arg = -(dx * dx / (2 * (p.sigma_x * p.sigma_x)) + dy * dy / (2 * (p.sigma_y * p.sigma_y)))
        out = np.maximum(out, p.amplitude * exp(arg))
    return out


def composite(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Pixelwise maximum of equally shaped maps.

    An empty list is a caller error: classes without masks take the
    no-mask path in the losses instead.
    """
    if len(maps) == 0:
        raise ConfigurationError("composite of an empty mask list")
    shape = np.shape(maps[0])
    for m in maps:
        if np.shape(m) != shape:
            raise ConfigurationError(f"mask shapes differ: {shape} vs {np.shape(m)}")
    out = np.array(maps[0], dtype=np.float64, copy=True)
    for m in maps[1:]:
        out = np.maximum(out, m)
    return out


def validate(library: MaskLibrary, model_config) -> None:
    """Cross-check a library against a model's class count and CAM resolution."""
    if library.num_classes != model_config.num_classes:
        raise ValidationError(
            f"library has {library.num_classes} classes, model has {model_config.num_classes}", "classes")
    if tuple(library.raster) != tuple(model_config.cam_size):
        raise ValidationError(
            f"raster {library.raster} does not match CAM resolution {model_config.cam_size}", "raster")
    for c, masks in enumerate(library.masks):
        for i, m in enumerate(masks):
            _check_peaks(m, f"classes[{c}].masks[{i}]")


# ---------------------------------------------------------------------------
# document format

_PEAK_SCHEMA = {
    "type": "object",
    "required": ["cx", "cy", "sigma_x", "sigma_y", "amplitude"],
    "additionalProperties": False,
    "properties": {
        "cx": {"type": "number", "minimum": 0, "maximum": 1},
        "cy": {"type": "number", "minimum": 0, "maximum": 1},
        "sigma_x": {"type": "number", "exclusiveMinimum": 0},
        "sigma_y": {"type": "number", "exclusiveMinimum": 0},
        "amplitude": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
}

LIBRARY_SCHEMA = {
    "type": "object",
    "required": ["classes", "raster"],
    "additionalProperties": False,
    "properties": {
        "classes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "masks"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "masks": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["label", "peaks"],
                            "additionalProperties": False,
                            "properties": {
                                "label": {"type": "string"},
                                "peaks": {"type": "array", "minItems": 1, "items": _PEAK_SCHEMA},
                            },
                        },
                    },
                },
            },
        },
        "raster": {
            "type": "object",
            "required": ["h", "w"],
            "additionalProperties": False,
            "properties": {"h": {"type": "integer", "minimum": 1}, "w": {"type": "integer", "minimum": 1}},
        },
    },
}


def _json_path(path) -> str:
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def to_document(library: MaskLibrary) -> dict:
    return {
        "classes": [
            {
                "name": name,
                "masks": [
                    {
                        "label": m.label,
                        "peaks": [
                            {"cx": p.cx, "cy": p.cy, "sigma_x": p.sigma_x, "sigma_y": p.sigma_y,
                             "amplitude": p.amplitude}
                            for p in m.peaks
                        ],
                    }
                    for m in masks
                ],
            }
            for name, masks in zip(library.class_names, library.masks)
        ],
        "raster": {"h": library.raster[0], "w": library.raster[1]},
    }


def from_document(doc: dict) -> MaskLibrary:
    errors = sorted(jsonschema.Draft202012Validator(LIBRARY_SCHEMA).iter_errors(doc),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ValidationError(e.message, _json_path(e.absolute_path))
    names, masks = [], []
    for cls in doc["classes"]:
        names.append(cls["name"])
        masks.append([
            AttentionMask(tuple(GaussianPeak(**{k: float(v) for k, v in p.items()}) for p in m["peaks"]),
                          m["label"])
            for m in cls["masks"]
        ])
    return MaskLibrary(names, masks, (doc["raster"]["h"], doc["raster"]["w"]))


def dumps(library: MaskLibrary) -> str:
    """Canonical JSON text: fixed key order, two-space indent, trailing newline."""
    return json.dumps(to_document(library), indent=2) + "\n"


def loads(text: str) -> MaskLibrary:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"not valid JSON: {e}") from e
    return from_document(doc)


def save(library: MaskLibrary, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(library))
    return path


def load(path) -> MaskLibrary:
    return loads(Path(path).read_text())
