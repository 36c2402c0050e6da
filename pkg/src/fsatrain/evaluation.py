"""Accuracy, confusion matrices, leakage and entropy diagnostics, CAM export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import Dataset, write_pgm
from .errors import ConfigurationError, InputError
from .losses import leakage, transform
from .model import Model


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""
    counts: np.ndarray
    class_names: tuple[str, ...] = ()

    @classmethod
    def from_predictions(cls, labels, preds, num_classes: int, class_names=()) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(labels), np.asarray(preds)), 1)
        return cls(counts, tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "counts": self.counts.tolist()}

    def format(self) -> str:
        names = self.class_names or tuple(str(i) for i in range(len(self.counts)))
        width = max(len(n) for n in names)
        lines = [" " * width + "  " + " ".join(f"{i:>5d}" for i in range(len(names)))]
        for i, n in enumerate(names):
            lines.append(f"{n:>{width}}  " + " ".join(f"{v:>5d}" for v in self.counts[i]))
        return "\n".join(lines)


def forward_batches(model: Model, images: np.ndarray, batch_size: int = 256):
    """Yield ``(logits, cams)`` arrays batch by batch without building a graph."""
    with nc.no_grad():
        for lo in range(0, len(images), batch_size):
            logits, cams = model.forward(images[lo:lo + batch_size])
            yield logits.data, cams.data


def _check_classes(model: Model, data: Dataset) -> None:
    if len(data.class_names) != model.config.num_classes:
        raise ConfigurationError(
            f"dataset has {len(data.class_names)} classes, model has {model.config.num_classes}")


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> tuple[float, ConfusionMatrix]:
    """Accuracy and confusion matrix; argmax ties go to the lowest class index."""
    _check_classes(model, data)
    preds = [np.argmax(lg, axis=1) for lg, _ in forward_batches(model, data.images, batch_size)]
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    cm = ConfusionMatrix.from_predictions(data.labels, preds, model.config.num_classes, data.class_names)
    return cm.accuracy, cm


def per_sample_leakage(model: Model, data: Dataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for lo, (_, cams) in zip(range(0, len(data), batch_size), forward_batches(model, data.images, batch_size)):
        with nc.no_grad():
            t = transform(nc.Tensor(cams))
            out.append(leakage(t, data.labels[lo:lo + batch_size], per_sample=True).data)
    return np.concatenate(out) if out else np.zeros(0)


def leakage_metric(model: Model, data: Dataset, batch_size: int = 256) -> float:
    """Dataset mean of the leakage regulariser (same code path as training)."""
    if len(data) == 0:
        raise InputError("leakage_metric needs a nonempty dataset")
    return float(nc.ordered_mean(per_sample_leakage(model, data, batch_size)))


def spatial_entropy(maps: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each map normalised to sum to one; maps [..., h, w] >= 0."""
    flat = maps.reshape(maps.shape[:-2] + (-1,)).astype(np.float64)
    p = flat / flat.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def attention_entropy(model: Model, data: Dataset, classes=None, batch_size: int = 256) -> dict[int, float]:
    """Mean spatial entropy of T(A^c*) per true class (only ``classes`` if given)."""
    ent, lab = [], []
    for lo, (_, cams) in zip(range(0, len(data), batch_size), forward_batches(model, data.images, batch_size)):
        labels = data.labels[lo:lo + batch_size]
        t = 1.0 / (1.0 + np.exp(-cams.astype(np.float64)))
        ent.append(spatial_entropy(t[np.arange(len(labels)), labels]))
        lab.append(labels)
    ent, lab = np.concatenate(ent), np.concatenate(lab)
    wanted = range(model.config.num_classes) if classes is None else classes
    return {int(c): float(ent[lab == c].mean()) for c in wanted if np.any(lab == c)}


# ---------------------------------------------------------------------------
# CAM export

def to_pgm_levels(t: np.ndarray) -> np.ndarray:
    """round(255 * t) with halves rounded up, so 0.5 -> 128."""
    return np.floor(np.asarray(t, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def export_cams(model: Model, data: Dataset, out_dir, indices=None, batch_size: int = 256) -> Path:
    """Write T(A^C) for every class of each chosen sample as PGM and CSV plus ``index.csv``."""
    out = Path(out_dir)
    _check_classes(model, data)
    indices = list(range(len(data))) if indices is None else [int(i) for i in indices]
    sub = data.subset(indices)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for lo, (logits, cams) in zip(range(0, len(sub), batch_size),
                                      forward_batches(model, sub.images, batch_size)):
            t = 1.0 / (1.0 + np.exp(-cams.astype(np.float64)))
            for j in range(len(t)):
                idx = indices[lo + j]
                for c, name in enumerate(data.class_names):
                    stem = f"{idx:06d}_{name}"
                    write_pgm(out / f"{stem}.pgm", to_pgm_levels(t[j, c]))
                    np.savetxt(out / f"{stem}.csv", t[j, c], delimiter=",", fmt="%.17g")
                rows.append([idx, data.class_names[int(sub.labels[lo + j])],
                             data.class_names[int(np.argmax(logits[j]))], f"{idx:06d}_<class>"])
        with open(out / "index.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample", "true", "predicted", "stem"])
            w.writerows(rows)
    except OSError as e:
        raise OSError(f"{out}: CAM export failed: {e}") from e
    return out


def read_cam_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=","))


def export_epoch_grid(checkpoints, data: Dataset, out_dir, indices) -> Path:
    """One grid row per checkpoint: T(A^c*) of the chosen samples side by side.

    Writes ``grid.pgm`` (rows = checkpoints in the given order) and
    ``grid.json`` naming the checkpoint behind each row.
    """
    from .training import load_checkpoint

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    indices = [int(i) for i in indices]
    sub = data.subset(indices)
    rows, names = [], []
    for ck in checkpoints:
        model, _, meta = load_checkpoint(ck)
        (_, cams), = list(forward_batches(model, sub.images, len(sub)))
        t = 1.0 / (1.0 + np.exp(-cams.astype(np.float64)))
        maps = t[np.arange(len(sub)), sub.labels]
        rows.append(np.concatenate(list(maps), axis=1))
        names.append({"checkpoint": str(ck), "epoch": meta.get("epoch")})
    grid = np.concatenate(rows, axis=0)
    write_pgm(out / "grid.pgm", to_pgm_levels(grid))
    (out / "grid.json").write_text(json.dumps({"samples": indices, "rows": names}, indent=2) + "\n")
    return out
