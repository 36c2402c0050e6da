"""CAM classifier: conv/fire backbone, 1x1 class-map head, global average pool.

The logits are the spatial means of the class activation maps, so the maps
returned by :meth:`Model.forward` are exactly what the attention losses see.
The attention head itself has no parameters; exporting for inference just
drops training state.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, InputError, IntegrityError, ValidationError


@dataclass(frozen=True)
class BlockSpec:
    """One backbone block: 3x3 conv, or fire module when ``squeeze`` is set."""
    out_channels: int
    squeeze: int | None = None
    downsample: bool = False


def _default_blocks() -> tuple[BlockSpec, ...]:
    return (
        BlockSpec(8, downsample=True),
        BlockSpec(16, downsample=True),
        BlockSpec(32, squeeze=8, downsample=True),
        BlockSpec(32),
    )


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int, int] = (1, 64, 64)
    num_classes: int = 5
    blocks: tuple[BlockSpec, ...] = field(default_factory=_default_blocks)
    init_seed: int = 0
    standardize_input: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.blocks))

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(b.downsample for b in self.blocks)

    @property
    def cam_size(self) -> tuple[int, int]:
        f = self.downsample_factor
        return self.input_size[1] // f, self.input_size[2] // f

    def validate(self) -> None:
        ch, h, w = self.input_size
        if ch < 1 or h < 1 or w < 1:
            raise ConfigurationError(f"input_size must be positive, got {self.input_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        f = self.downsample_factor
        if h % f or w % f:
            raise ConfigurationError(
                f"downsampling factor {f} does not divide input {h}x{w}")
        hc, wc = self.cam_size
        if hc < 4 or wc < 4:
            raise ConfigurationError(f"CAM resolution {hc}x{wc} is below the 4x4 minimum")
        for i, b in enumerate(self.blocks):
            if b.out_channels < 1:
                raise ConfigurationError(f"blocks[{i}].out_channels must be >= 1")
            if b.squeeze is not None and (b.squeeze < 1 or b.out_channels % 2):
                raise ConfigurationError(
                    f"blocks[{i}]: fire block needs squeeze >= 1 and even out_channels")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    cin = config.input_size[0]
    for i, b in enumerate(config.blocks):
        if b.squeeze is None:
            shapes += [(f"block{i}.conv.weight", (b.out_channels, cin, 3, 3)),
                       (f"block{i}.conv.bias", (b.out_channels,))]
        else:
            half = b.out_channels // 2
            shapes += [(f"block{i}.squeeze.weight", (b.squeeze, cin, 1, 1)),
                       (f"block{i}.squeeze.bias", (b.squeeze,)),
                       (f"block{i}.expand1.weight", (half, b.squeeze, 1, 1)),
                       (f"block{i}.expand1.bias", (half,)),
                       (f"block{i}.expand3.weight", (half, b.squeeze, 3, 3)),
                       (f"block{i}.expand3.bias", (half,))]
        cin = b.out_channels
    shapes += [("cam_head.weight", (config.num_classes, cin, 1, 1)),
               ("cam_head.bias", (config.num_classes,))]
    return shapes


def expected_param_count(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for _, s in _param_shapes(config)))


STANDARDIZE_EPS = 1e-3


def standardize(images: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit spread; a flat image maps to (near) zeros.

    Images carry no gradient, so this runs outside the tape. The eps floor
    keeps near-constant images from blowing up sensor noise.
    """
    x = np.asarray(images)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    mu = nc.ordered_mean(flat, axis=1)[:, None]
    d = flat - mu
    var = nc.ordered_mean(d * d, axis=1)[:, None]
    return (d / np.sqrt(var + x.dtype.type(STANDARDIZE_EPS) ** 2)).reshape(x.shape).astype(x.dtype)


class Model:
    """Backbone + CAM head. Parameters live in ``self.params`` in declaration order."""

    def __init__(self, config: ModelConfig, params: dict[str, nc.Tensor]):
        self.config = config
        self.params = params

    @property
    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _conv(self, x, prefix, padding=0):
        return nc.conv2d(x, self.params[prefix + ".weight"], self.params[prefix + ".bias"],
                         padding=padding)

    def forward(self, images) -> tuple[nc.Tensor, nc.Tensor]:
        """Return ``(logits [N,C], cams [N,C,hc,wc])`` from one pass."""
        x = nc.as_tensor(images)
        expected = self.config.input_size
        if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise InputError(f"expected images of shape [N,{','.join(map(str, expected))}], got {x.shape}")
        if self.config.standardize_input:
            x = nc.as_tensor(standardize(x.data))
        for i, b in enumerate(self.config.blocks):
            if b.squeeze is None:
                x = nc.relu(self._conv(x, f"block{i}.conv", padding=1))
            else:
                s = nc.relu(self._conv(x, f"block{i}.squeeze"))
                e1 = self._conv(s, f"block{i}.expand1")
                e3 = self._conv(s, f"block{i}.expand3", padding=1)
                x = nc.relu(nc.concat([e1, e3], axis=1))
            if b.downsample:
                x = nc.maxpool2d(x, 2)
        cams = self._conv(x, "cam_head")
        logits = nc.global_avg_pool(cams)
        return logits, cams

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            a = np.asarray(arrays[name])
            if a.shape != p.shape:
                raise ValidationError(f"shape {a.shape} does not match {p.shape}", name)
            p.data = np.array(a, dtype=p.data.dtype)


class InferenceModel(Model):
    """A model stripped of training-only state (no gradients, no optimiser)."""

    def forward(self, images):
        with nc.no_grad():
            return super().forward(images)

    __call__ = forward

    def predict(self, images) -> np.ndarray:
        logits, _ = self.forward(images)
        return np.argmax(logits.data, axis=1)


def build(config: ModelConfig | None = None) -> Model:
    """Create a model with fan-in scaled uniform weights and zero biases."""
    config = config or ModelConfig()
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.init_seed))
    params = {}
    for name, shape in _param_shapes(config):
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 3.0 if name.startswith("cam_head") else 6.0
            bound = np.sqrt(gain / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = nc.Tensor(arr, requires_grad=True)
    return Model(config, params)


# ---------------------------------------------------------------------------
# serialisation
#
# A model file is a directory holding ``model.json`` (metadata) and
# ``params.bin``: every parameter flattened row-major, concatenated in
# declaration order, little-endian float32 (float64 when written from a
# 64-bit run). ``model.json`` records the dtype, byte length and sha256 of
# the blob so truncated or altered files are rejected before any load.

def blob_dtype(precision: str) -> str:
    return "<f8" if precision == "float64" else "<f4"


def pack_arrays(arrays: dict[str, np.ndarray], dtype: str) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=dtype).tobytes() for a in arrays.values())


def unpack_arrays(blob: bytes, shapes: dict[str, tuple], dtype: str, sha256: str | None = None,
                  what: str = "blob") -> dict[str, np.ndarray]:
    itemsize = np.dtype(dtype).itemsize
    need = sum(int(np.prod(s)) for s in shapes.values()) * itemsize
    if len(blob) != need:
        raise IntegrityError(f"{what}: expected {need} bytes, found {len(blob)}")
    if sha256 is not None and hashlib.sha256(blob).hexdigest() != sha256:
        raise IntegrityError(f"{what}: sha256 mismatch")
    out, off = {}, 0
    for name, shape in shapes.items():
        n = int(np.prod(shape)) * itemsize
        out[name] = np.frombuffer(blob[off:off + n], dtype=dtype).reshape(shape).copy()
        off += n
    return out


def _write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_model_dir(path, config: ModelConfig, arrays: dict[str, np.ndarray], precision: str,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = blob_dtype(precision)
    blob = pack_arrays(arrays, dtype)
    meta = {
        "format": "fsatrain-model/1",
        "config": config.to_dict(),
        "dtype": dtype,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        "params_bytes": len(blob),
        "params_sha256": hashlib.sha256(blob).hexdigest(),
    }
    meta.update(extra or {})
    _write_bytes(path / "params.bin", blob)
    _write_bytes(path / "model.json", (json.dumps(meta, indent=2) + "\n").encode())
    return path


def read_model_dir(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        meta = json.loads((path / "model.json").read_text())
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError as e:
        raise IntegrityError(f"missing model file: {e.filename}") from e
    config = ModelConfig.from_dict(meta["config"])
    shapes = {p["name"]: tuple(p["shape"]) for p in meta["params"]}
    expected = dict(_param_shapes(config))
    if shapes != expected:
        raise IntegrityError(f"{path}: parameter table does not match config")
    arrays = unpack_arrays(blob, shapes, meta["dtype"], meta.get("params_sha256"), str(path / "params.bin"))
    return config, arrays, meta


def export_inference(model: Model, path=None) -> InferenceModel:
    """Strip training state; optionally write the inference model to ``path``."""
    params = {k: nc.Tensor(p.data.copy()) for k, p in model.params.items()}
    inf = InferenceModel(model.config, params)
    if path is not None:
        write_model_dir(path, model.config, inf.state_arrays(), nc.get_precision(),
                        extra={"kind": "inference"})
    return inf


def load_inference(path) -> InferenceModel:
    config, arrays, _ = read_model_dir(path)
    return InferenceModel(config, {k: nc.Tensor(v) for k, v in arrays.items()})
