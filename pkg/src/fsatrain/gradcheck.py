"""Central finite-difference verification of every differentiable op and loss.

Each case builds a scalar from fresh float64 inputs. Non-scalar op outputs
are contracted with a fixed random weight so every output element feeds
the check. The error for one tensor is max|analytic - numeric| divided by
max(max|analytic|, max|numeric|, 1e-6); a case passes when every input's
error is below the tolerance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numcore as nc
from .losses import LossVariant, Variant, fsa_stage1, fsa_stage2, leakage, total_loss, transform
from .masks import AttentionMask, GaussianPeak, MaskLibrary
from .model import BlockSpec, ModelConfig, build

EPS = 1e-5
TOL = 1e-4


@dataclass
class CaseResult:
    name: str
    seed: int
    max_rel_err: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOL


@dataclass
class GradcheckReport:
    results: list[CaseResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.results) and all(r.ok for r in self.results)

    def worst(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.max_rel_err)
        return out

    def format(self) -> str:
        lines = [f"{name:<28s} max_rel_err {err:.2e} {'ok' if err < TOL else 'FAIL'}"
                 for name, err in self.worst().items()]
        seeds = len({r.seed for r in self.results})
        lines.append(f"{len(self.results)} checks over {seeds} seeds: {'PASS' if self.ok else 'FAIL'}")
        return "\n".join(lines)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-6)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def check(fn: Callable[..., nc.Tensor], arrays: list[np.ndarray], eps: float = EPS) -> float:
    """Max relative error between backprop and central differences of ``fn``."""
    with nc.precision("float64"):
        inputs = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
        analytic = nc.grad(fn(*inputs), inputs)
        worst = 0.0
        with nc.no_grad():
            for t, g in zip(inputs, analytic):
                numeric = np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    hi = fn(*inputs).item()
                    flat[i] = orig - eps
                    lo = fn(*inputs).item()
                    flat[i] = orig
                    numeric.reshape(-1)[i] = (hi - lo) / (2 * eps)
                worst = max(worst, rel_err(g, numeric))
    return worst


def _contract(out: nc.Tensor, weight: np.ndarray) -> nc.Tensor:
    return nc.sum(nc.mul(out, nc.Tensor(weight)))


def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge values off kinks so differences never straddle one."""
    for p in points:
        close = np.abs(x - p) < margin
        x = np.where(close, p + np.where(x >= p, margin, -margin), x)
    return x


def _distinct(rng, shape) -> np.ndarray:
    """Values with pairwise gaps far above EPS, so max-type ops never tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 + rng.uniform(0, 0.01, n)).reshape(shape) - n * 0.025


def _library(rng, classes: int, raster, counts) -> MaskLibrary:
    masks = []
    for c in range(classes):
        masks.append([AttentionMask((GaussianPeak(float(rng.uniform(0.1, 0.9)), float(rng.uniform(0.1, 0.9)),
                                                  float(rng.uniform(0.1, 0.4)), float(rng.uniform(0.1, 0.4)),
                                                  float(rng.uniform(0.5, 1.0))),), f"m{c}.{i}")
                      for i in range(counts[c])])
    return MaskLibrary([f"c{c}" for c in range(classes)], masks, raster)


def _argmin_margin(cams: np.ndarray, labels, library: MaskLibrary) -> float:
    """Smallest gap between best and second-best mask MSE over the batch."""
    t = 1.0 / (1.0 + np.exp(-cams))
    gap = np.inf
    for i, c in enumerate(labels):
        r = library.rasters(c)
        if len(r) >= 2:
            mse = np.sort(((t[i, c][None] - r) ** 2).mean(axis=(1, 2)))
            gap = min(gap, mse[1] - mse[0])
    return gap


def cases(seed: int) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """All (name, fn, inputs) instances for one seed."""
    rng = np.random.default_rng(seed)
    out = []
    r = lambda *s: rng.normal(size=s)  # noqa: E731

    x, k, b = r(2, 3, 8, 8), r(4, 3, 3, 3), r(4)
    w = r(2, 4, 8, 8)
    out.append(("conv2d", lambda x, k, b: _contract(nc.conv2d(x, k, b, padding=1), w), [x, k, b]))
    w2 = r(2, 4, 3, 3)
    out.append(("conv2d_stride2", lambda x, k, b: _contract(nc.conv2d(x, k, b, stride=2), w2), [x, k, b]))
    out.append(("conv2d_sum", lambda x, k: nc.sum(nc.conv2d(x, k)), [x, k]))

    a, c = r(3, 4), r(3, 4)
    wa = r(3, 4)
    out.append(("relu", lambda a: _contract(nc.relu(a), wa), [_away_from(a, [0.0], 1e-3)]))
    out.append(("sigmoid", lambda a: _contract(nc.sigmoid(a), wa), [a * 3]))
    out.append(("hadamard", lambda a, c: _contract(nc.hadamard(a, c), wa), [a, c]))
    out.append(("add", lambda a, c: _contract(nc.add(a, c), wa), [a, c]))
    out.append(("sub", lambda a, c: _contract(nc.sub(a, c), wa), [a, c]))
    out.append(("mul_broadcast", lambda a, v: _contract(nc.mul(a, v), wa), [a, r(1, 4)]))
    out.append(("mul_scalar", lambda a: _contract(nc.mul_scalar(a, 2.5), wa), [a]))
    out.append(("add_scalar", lambda a: _contract(nc.add_scalar(a, -0.7), wa), [a]))
    out.append(("square", lambda a: _contract(nc.square(a), wa), [a]))
    out.append(("reduce_mean", lambda a: nc.mean(nc.square(a)), [a]))
    wm = r(3)
    out.append(("mean_axis", lambda a: _contract(nc.mean(a, axis=1), wm), [a]))
    out.append(("sum_axis", lambda a: _contract(nc.sum(a, axis=1), wm), [a]))

    m = r(2, 3, 4, 4)
    wg = r(2, 3)
    out.append(("global_avg_pool", lambda m: _contract(nc.global_avg_pool(m), wg), [m]))
    p1, p2, p3 = np.split(_distinct(rng, (3, 4, 4)), 3)
    wp = r(4, 4)
    out.append(("reduce_max_pixelwise",
                lambda p, q, s: _contract(nc.reduce_max_pixelwise([p, q, s]), wp), [p1[0], p2[0], p3[0]]))
    wx = r(2, 3, 4, 4)
    out.append(("maxpool2d", lambda m: _contract(nc.maxpool2d(m, 2), wx), [_distinct(rng, (2, 3, 8, 8))]))
    wc = r(2, 6, 4, 4)
    out.append(("concat", lambda m, n: _contract(nc.concat([m, n], axis=1), wc), [m, r(2, 3, 4, 4)]))
    labels = rng.integers(0, 3, size=2)
    wt = r(2, 4, 4)
    out.append(("take_class", lambda m: _contract(nc.take_class(m, labels), wt), [m]))
    wr = r(6, 16)
    out.append(("reshape", lambda m: _contract(nc.reshape(m, (6, 16)), wr), [m]))

    lg = r(4, 5) * 2
    lab = rng.integers(0, 5, size=4)
    out.append(("softmax_cross_entropy", lambda z: nc.softmax_cross_entropy(z, lab), [lg]))
    out.append(("mse_mean", lambda a, c: nc.mse_mean(a, c), [a, c]))

    # losses
    cams = r(3, 5, 4, 4) * 1.5
    lab3 = np.array([0, 3, 4])
    lib = _library(rng, 5, (4, 4), [0, 1, 1, 3, 3])
    wz = r(3, 5, 4, 4)
    out.append(("transform", lambda z: _contract(transform(z), wz), [cams]))
    out.append(("leakage", lambda z: leakage(transform(z), lab3), [cams]))
    out.append(("fsa_stage1", lambda z: fsa_stage1(z, lab3, lib, 0.2)[0], [cams]))
    # stage 2 is differentiated only away from argmin ties
    for _ in range(50):
        if _argmin_margin(cams, lab3, lib) > 1e-6:
            break
        cams = r(3, 5, 4, 4) * 1.5
    out.append(("fsa_stage2", lambda z: fsa_stage2(z, lab3, lib, 0.2)[0], [cams]))
    for variant in Variant:
        lv = LossVariant(variant)
        for epoch in (1, 16):
            name = f"total_loss[{variant.value},e{epoch}]"
            out.append((name, lambda z, g, lv=lv, epoch=epoch: total_loss(lv, epoch, g, z, lab3, lib)[0],
                        [cams, r(3, 5)]))

    # a tiny full model, every parameter at once
    cfg = ModelConfig(input_size=(1, 16, 16), num_classes=3, init_seed=seed,
                      blocks=(BlockSpec(4, downsample=True), BlockSpec(4, squeeze=2, downsample=False),
                              BlockSpec(4, downsample=True)))
    with nc.precision("float64"):
        model = build(cfg)
    names = list(model.params)
    img = rng.uniform(size=(2, 1, 16, 16))
    lab2 = np.array([1, 2])
    mlib = _library(rng, 3, cfg.cam_size, [0, 2, 1])

    def full(*ps):
        model.params = dict(zip(names, ps))
        logits, cams_ = model.forward(img)
        return total_loss(LossVariant(Variant.FSA_STAGE2_ONLY), 1, logits, cams_, lab2, mlib)[0]

    # nonzero biases keep relu inputs off the exact kink that zero-init creates
    params = [model.params[n].data + (0.1 * rng.normal(size=model.params[n].shape) if n.endswith("bias") else 0)
              for n in names]
    out.append(("model_full", full, params))
    return out


def run(seeds=range(20), names=None, progress: Callable[[str], None] | None = None) -> GradcheckReport:
    report = GradcheckReport()
    for seed in seeds:
        for name, fn, arrays in cases(seed):
            if names is not None and not any(name.startswith(n) for n in names):
                continue
            t0 = time.perf_counter()
            err = check(fn, arrays)
            res = CaseResult(name, int(seed), err, time.perf_counter() - t0)
            report.results.append(res)
            if progress is not None and not res.ok:
                progress(f"{name} seed {seed}: rel err {err:.2e}")
    return report

