"""Attention losses on class activation maps.

CAMs are squashed with a pixelwise sigmoid. The true class's map is pulled
towards its spatial mask(s) with a pixel-mean squared error, and a leakage
term penalises overlap between the true class's map and every other class's
map. Stage 1 targets the pixelwise max over all masks of the class; stage 2
targets only the closest mask (smallest MSE), chosen afresh on every pass.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, InputError
from .masks import MaskLibrary


class Variant(str, enum.Enum):
    CE = "ce"
    CE_MSE = "ce_mse"
    FSA_STAGE1_ONLY = "fsa_stage1_only"
    FSA_STAGE2_ONLY = "fsa_stage2_only"
    FSA_TWO_STAGE = "fsa_two_stage"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigurationError(
                f"unknown loss variant {value!r}; expected one of {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class LossVariant:
    variant: Variant = Variant.FSA_TWO_STAGE
    lambda_fsa: float = 10.0
    lambda_reg: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.lambda_fsa < 0 or self.lambda_reg < 0:
            raise ConfigurationError(
                f"loss weights must be >= 0, got lambda_fsa={self.lambda_fsa}, lambda_reg={self.lambda_reg}")


@dataclass
class LossBreakdown:
    total: nc.Tensor
    ce: float = 0.0
    fsa_first: float = 0.0
    fsa_reg: float = 0.0
    selected: np.ndarray | None = None
    stage: int = 0

    @property
    def mean_selected_index(self) -> float:
        if self.selected is None:
            return -1.0
        chosen = self.selected[self.selected >= 0]
        return float(chosen.mean()) if chosen.size else -1.0


def transform(cams: nc.Tensor) -> nc.Tensor:
    """Pixelwise sigmoid, mapping CAMs into (0, 1)."""
    return nc.sigmoid(cams)


def _check_resolution(maps: nc.Tensor, library: MaskLibrary) -> None:
    if tuple(maps.shape[-2:]) != tuple(library.raster):
        raise ConfigurationError(
            f"CAM resolution {tuple(maps.shape[-2:])} does not match mask raster {library.raster}")
    if maps.shape[1] != library.num_classes:
        raise ConfigurationError(
            f"{maps.shape[1]} CAM channels but {library.num_classes} mask classes")


def _labels(labels, n: int, c: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise InputError(f"need {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c})")
    return labels


def leakage(normalized: nc.Tensor, labels, per_sample: bool = False) -> nc.Tensor:
    """Sum over C != c* of mean(T(A^c*) * T(A^C)), averaged over the batch.

    ``normalized`` holds already-transformed maps [N, C, h, w].
    """
    n, c = normalized.shape[:2]
    if c < 2:
        raise ConfigurationError("leakage needs at least two classes")
    labels = _labels(labels, n, c)
    true_map = nc.take_class(normalized, labels)                       # [N,h,w]
    overlap = nc.mul(normalized, nc.reshape(true_map, (n, 1) + true_map.shape[1:]))
    per_class = nc.mean(overlap, axis=(2, 3))                          # [N,C]
    off = np.ones((n, c))
    off[np.arange(n), labels] = 0.0
    per_n = nc.sum(nc.mul(per_class, nc.Tensor(off)), axis=1)          # [N]
    return per_n if per_sample else nc.mean(per_n)


def _first_term(true_map: nc.Tensor, targets: np.ndarray, has_mask: np.ndarray) -> nc.Tensor:
    """Batch mean of per-sample pixel MSE; samples without masks contribute 0."""
    diff = nc.sub(true_map, nc.Tensor(targets))
    per_n = nc.mean(nc.square(diff), axis=(1, 2))
    return nc.mean(nc.mul(per_n, nc.Tensor(has_mask.astype(np.float64))))


def _targets_stage1(library: MaskLibrary, labels: np.ndarray):
    h, w = library.raster
    targets = np.zeros((len(labels), h, w))
    has = np.zeros(len(labels), dtype=bool)
    for i, c in enumerate(labels):
        if library.counts[c]:
            targets[i] = library.composite(c)
            has[i] = True
    return targets, has


def select_masks(true_map: np.ndarray, library: MaskLibrary, labels: np.ndarray) -> np.ndarray:
    """Index of the closest mask (pixel MSE) per sample; -1 when the class has none.

    Ties go to the lowest index.
    """
    sel = np.full(len(labels), -1, dtype=np.int64)
    for i, c in enumerate(labels):
        rasters = library.rasters(c)
        if len(rasters):
            d = true_map[i].astype(np.float64)[None] - rasters
            mse = nc.ordered_mean(d * d, axis=(1, 2))
            sel[i] = int(np.argmin(mse))
    return sel


def fsa_stage1(cams: nc.Tensor, labels, library: MaskLibrary, lambda_reg: float = 0.2,
               include_reg: bool = True) -> tuple[nc.Tensor, LossBreakdown]:
    """MSE to the class composite mask plus ``lambda_reg`` * leakage."""
    _check_resolution(cams, library)
    labels = _labels(labels, cams.shape[0], cams.shape[1])
    t = transform(cams)
    true_map = nc.take_class(t, labels)
    targets, has = _targets_stage1(library, labels)
    first = _first_term(true_map, targets, has)
    return _combine(first, t, labels, lambda_reg, include_reg, np.full(len(labels), -1), 1)


def fsa_stage2(cams: nc.Tensor, labels, library: MaskLibrary, lambda_reg: float = 0.2
               ) -> tuple[nc.Tensor, LossBreakdown]:
    """Min over the class's masks of the MSE, plus ``lambda_reg`` * leakage."""
    _check_resolution(cams, library)
    labels = _labels(labels, cams.shape[0], cams.shape[1])
    t = transform(cams)
    true_map = nc.take_class(t, labels)
    sel = select_masks(true_map.data, library, labels)
    h, w = library.raster
    targets = np.zeros((len(labels), h, w))
    for i, (c, k) in enumerate(zip(labels, sel)):
        if k >= 0:
            targets[i] = library.rasters(c)[k]
    first = _first_term(true_map, targets, sel >= 0)
    return _combine(first, t, labels, lambda_reg, True, sel, 2)


def _combine(first, t, labels, lambda_reg, include_reg, sel, stage):
    if include_reg:
        reg = leakage(t, labels)
        loss = nc.add(first, nc.mul_scalar(reg, lambda_reg))
        reg_value = reg.item()
    else:
        loss = first
        reg_value = 0.0
    return loss, LossBreakdown(loss, 0.0, first.item(), reg_value, sel, stage)


def active_stage(variant: Variant, epoch: int, stage1_epochs: int) -> int:
    """0 for CE-only, 1 or 2 for the FSA stage in effect at ``epoch`` (1-based)."""
    variant = Variant.parse(variant)
    if epoch < 1:
        raise ConfigurationError(f"epoch must be >= 1, got {epoch}")
    if variant is Variant.CE:
        return 0
    if variant in (Variant.CE_MSE, Variant.FSA_STAGE1_ONLY):
        return 1
    if variant is Variant.FSA_STAGE2_ONLY:
        return 2
    return 1 if epoch <= stage1_epochs else 2


def total_loss(variant: LossVariant, epoch: int, logits: nc.Tensor, cams: nc.Tensor, labels,
               library: MaskLibrary | None, stage1_epochs: int = 15) -> tuple[nc.Tensor, LossBreakdown]:
    """Cross-entropy plus the attention term selected by ``variant`` at ``epoch``.

    total = ce + lambda_fsa * (first + lambda_reg * leakage); CE_MSE drops
    the leakage term and always uses the composite target.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ce = nc.softmax_cross_entropy(logits, labels)
    stage = active_stage(variant.variant, epoch, stage1_epochs)
    if stage == 0:
        return ce, LossBreakdown(ce, ce.item(), 0.0, 0.0, None, 0)
    if library is None:
        raise ConfigurationError(f"variant {variant.variant.value} needs a mask library")
    if variant.variant is Variant.CE_MSE:
        fsa, bd = fsa_stage1(cams, labels, library, include_reg=False)
    elif stage == 1:
        fsa, bd = fsa_stage1(cams, labels, library, variant.lambda_reg)
    else:
        fsa, bd = fsa_stage2(cams, labels, library, variant.lambda_reg)
    total = nc.add(ce, nc.mul_scalar(fsa, variant.lambda_fsa))
    bd.total = total
    bd.ce = ce.item()
    return total, bd
