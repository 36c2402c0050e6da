"""Mini-batch SGD training with the two-stage attention schedule.

A run is a deterministic function of (model init, data, masks, config):
batches come from a per-epoch Fisher-Yates shuffle seeded by
(shuffle_seed, epoch), and checkpoints hold the momentum buffers, so a run
resumed from epoch k ends in the same state as an uninterrupted one.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import numcore as nc
from .data import Dataset, SplitMix64, derive_seed
from .errors import ConfigurationError, IntegrityError, NumericError, TrainingError, ValidationError
from .losses import LossVariant, Variant, active_stage, total_loss
from .masks import MaskLibrary, dumps as dump_library
from .model import Model, ModelConfig, blob_dtype, build, read_model_dir, unpack_arrays, write_model_dir

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "variant", "total", "ce", "fsa_first", "fsa_reg", "mean_selected_index")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    stage1_epochs: int = 15
    batch_size: int = 64
    lr: float = 0.0005
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: LossVariant = field(default_factory=LossVariant)
    shuffle_seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 5
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossVariant(**self.loss))
        if self.epochs < 1 or not 0 <= self.stage1_epochs <= self.epochs:
            raise ConfigurationError(
                f"need epochs >= 1 and 0 <= stage1_epochs <= epochs, got {self.epochs}, {self.stage1_epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got {self.precision!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"]["variant"] = self.loss.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# 5e-4 suits fine-tuning pretrained weights. Our tiny nets start
# from scratch and barely move in 30 epochs at that rate, so desk runs use 2e-3.
DESK_LR = 0.002


def desk_config(**kw) -> TrainConfig:
    """Paper schedule and loss weights, with the from-scratch learning rate."""
    return TrainConfig(**{"lr": DESK_LR, **kw})


def config_hash(*docs) -> str:
    text = json.dumps(docs, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _dict_diff(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _dict_diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: {va!r} != {vb!r}")
    return out


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    total: float
    ce: float
    fsa_first: float
    fsa_reg: float
    mean_selected_index: float
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    config: dict
    records: list[EpochRecord] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    stage_transition_epoch: int | None = None
    final_checkpoint: str | None = None

    def to_dict(self) -> dict:
        # wall-clock times are kept out so reports from identical runs are byte-identical
        return {
            "config": self.config,
            "stage_transition_epoch": self.stage_transition_epoch,
            "final_checkpoint": self.final_checkpoint,
            "epochs": [dataclasses.asdict(r) for r in self.records],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def epoch_order(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return SplitMix64(derive_seed(shuffle_seed, 0x5F, epoch)).shuffle(n)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# checkpoints
#
# <dir>/model.json + params.bin   model format (see model.py), plus keys
#     epoch, config_hash, train_config, library_sha256, momentum_bytes,
#     momentum_sha256
# <dir>/momentum.bin             SGD velocity buffers, same layout as params

def save_checkpoint(path, model: Model, velocity: dict[str, np.ndarray], epoch: int,
                    config: TrainConfig, chash: str, library_sha: str) -> Path:
    path = Path(path)
    dtype = blob_dtype(config.precision)
    mom = b"".join(np.ascontiguousarray(velocity[k], dtype=dtype).tobytes() for k in model.params)
    path.mkdir(parents=True, exist_ok=True)
    (path / "momentum.bin").write_bytes(mom)
    write_model_dir(path, model.config, model.state_arrays(), config.precision, extra={
        "kind": "checkpoint",
        "epoch": epoch,
        "seed": model.config.init_seed,
        "loss_variant": config.loss.variant.value,
        "config_hash": chash,
        "train_config": config.to_dict(),
        "library_sha256": library_sha,
        "momentum_bytes": len(mom),
        "momentum_sha256": hashlib.sha256(mom).hexdigest(),
    })
    return path


def load_checkpoint(path) -> tuple[Model, dict[str, np.ndarray], dict]:
    """Read a training checkpoint; everything is verified before anything is returned."""
    path = Path(path)
    config, arrays, meta = read_model_dir(path)
    if "momentum_sha256" not in meta or not (path / "momentum.bin").exists():
        raise ValidationError("checkpoint has no momentum state", str(path))
    shapes = {k: v.shape for k, v in arrays.items()}
    velocity = unpack_arrays((path / "momentum.bin").read_bytes(), shapes, meta["dtype"],
                             meta["momentum_sha256"], str(path / "momentum.bin"))
    with nc.precision(meta["train_config"]["precision"]):
        model = Model(config, {k: nc.Tensor(v, requires_grad=True) for k, v in arrays.items()})
    return model, velocity, meta


# ---------------------------------------------------------------------------

def predict_logits(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with nc.no_grad():
        for lo in range(0, len(images), batch_size):
            logits, _ = model.forward(images[lo:lo + batch_size])
            out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def accuracy(model: Model, data: Dataset, batch_size: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    pred = np.argmax(predict_logits(model, data.images, batch_size), axis=1)
    return float(np.mean(pred == data.labels))


def train(model: Model, train_data: Dataset, library: MaskLibrary | None, config: TrainConfig,
          val_data: Dataset | None = None, out_dir=None, resume_from=None, stop_after: int | None = None
          ) -> tuple[Model, TrainReport]:
    """Train ``model`` in place and return it with a per-epoch report.

    ``out_dir`` receives ``train_log.csv``, ``report.json``, ``timing.csv`` and
    ``checkpoints/epoch_XXX``. ``stop_after`` ends the run early (as if
    interrupted) after that epoch; ``resume_from`` continues from a checkpoint.
    """
    if len(train_data) == 0:
        raise ConfigurationError("training set is empty")
    needs_masks = config.loss.variant is not Variant.CE
    if needs_masks:
        if library is None:
            raise ConfigurationError(f"variant {config.loss.variant.value} needs a mask library")
        from .masks import validate
        validate(library, model.config)
    library_sha = hashlib.sha256(dump_library(library).encode()).hexdigest() if library else ""
    chash = config_hash(config.to_dict(), model.config.to_dict(), library_sha)

    with nc.precision(config.precision), threadpool_limits(1 if config.deterministic else None):
        for p in model.params.values():
            p.data = p.data.astype(config.precision)
        opt = nc.SGD(model.params, config.lr, config.momentum, config.weight_decay)
        report = TrainReport(config=config.to_dict())
        start_epoch = 1
        out = Path(out_dir) if out_dir is not None else None
        if resume_from is not None:
            ck_model, velocity, meta = load_checkpoint(resume_from)
            if meta["config_hash"] != chash:
                diff = _dict_diff(meta["train_config"], config.to_dict())
                raise ConfigurationError(
                    "checkpoint config does not match: " + ("; ".join(diff) or "model or mask library differs"))
            model.load_state_arrays(ck_model.state_arrays())
            opt.velocity = {k: v.astype(config.precision) for k, v in velocity.items()}
            start_epoch = meta["epoch"] + 1
            if out is not None and (Path(resume_from).parent.parent / "report.json").exists():
                prev = json.loads((Path(resume_from).parent.parent / "report.json").read_text())
                report.records = [EpochRecord(**r) for r in prev["epochs"] if r["epoch"] < start_epoch]
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = out / "train_log.csv"
            if start_epoch == 1 or not log_path.exists():
                with open(log_path, "w", newline="") as f:
                    csv.writer(f).writerow(LOG_COLUMNS)
            else:
                _truncate_log(log_path, start_epoch)
        last_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
        images = train_data.images.astype(config.precision)
        labels = train_data.labels
        n = len(labels)
        for epoch in range(start_epoch, last_epoch + 1):
            t0 = time.perf_counter()
            stage = active_stage(config.loss.variant, epoch, config.stage1_epochs)
            order = epoch_order(n, config.shuffle_seed, epoch)
            sums = np.zeros(4)
            sel_sum, sel_count, correct = 0.0, 0, 0
            rows = []
            for step, lo in enumerate(range(0, n, config.batch_size)):
                idx = order[lo:lo + config.batch_size]
                opt.zero_grad()
                logits, cams = model.forward(images[idx])
                try:
                    loss, bd = total_loss(config.loss, epoch, logits, cams, labels[idx], library,
                                          config.stage1_epochs)
                    nc.backward(loss)
                    opt.step()
                except NumericError as e:
                    raise TrainingError(f"epoch {epoch} step {step}: {e}") from e
                k = len(idx)
                sums += k * np.array([bd.total.item(), bd.ce, bd.fsa_first, bd.fsa_reg])
                if bd.selected is not None:
                    chosen = bd.selected[bd.selected >= 0]
                    sel_sum += float(chosen.sum())
                    sel_count += len(chosen)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
                label = config.loss.variant.value + (f"[stage{stage}]" if stage else "")
                rows.append([epoch, step, label, _fmt(bd.total.item()), _fmt(bd.ce), _fmt(bd.fsa_first),
                             _fmt(bd.fsa_reg), _fmt(bd.mean_selected_index)])
            val_acc = accuracy(model, val_data) if val_data is not None and len(val_data) else float("nan")
            means = sums / n
            rec = EpochRecord(epoch, stage, *map(float, means),
                              sel_sum / sel_count if sel_count else -1.0, correct / n, val_acc)
            report.records.append(rec)
            report.wall_times.append(time.perf_counter() - t0)
            if stage == 2 and report.stage_transition_epoch is None and config.loss.variant is Variant.FSA_TWO_STAGE:
                report.stage_transition_epoch = epoch
            log.info("epoch %d stage %d loss %.4f train_acc %.3f val_acc %.3f (%.1fs)", epoch, stage,
                     rec.total, rec.train_acc, val_acc, report.wall_times[-1])
            if out is not None:
                with open(out / "train_log.csv", "a", newline="") as f:
                    csv.writer(f).writerows(rows)
                with open(out / "timing.csv", "a") as f:
                    f.write(f"{epoch},{report.wall_times[-1]:.3f}\n")
                due = (epoch % config.checkpoint_every == 0 if config.checkpoint_every else False)
                if due or epoch == last_epoch or epoch == config.stage1_epochs:
                    ck = save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}", model, opt.velocity,
                                         epoch, config, chash, library_sha)
                    report.final_checkpoint = str(ck.relative_to(out))
        if config.loss.variant is Variant.FSA_TWO_STAGE and config.stage1_epochs < config.epochs:
            report.stage_transition_epoch = config.stage1_epochs + 1
        if out is not None:
            (out / "report.json").write_text(report.dumps())
    return model, report


def _truncate_log(path: Path, start_epoch: int) -> None:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < start_epoch]
    with open(path, "w", newline="") as f:
        csv.writer(f).writerows(keep)


def run(train_data: Dataset, library: MaskLibrary | None, config: TrainConfig,
        model_config: ModelConfig | None = None, val_data: Dataset | None = None, out_dir=None
        ) -> tuple[Model, TrainReport]:
    """Build a fresh model and train it."""
    with nc.precision(config.precision):
        model = build(model_config or ModelConfig())
    return train(model, train_data, library, config, val_data, out_dir)
