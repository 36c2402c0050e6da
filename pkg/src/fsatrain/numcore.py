"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the CAM classifier and its losses are
provided. All reductions accumulate sequentially in ascending linear-index
order so results are reproducible bit-for-bit; matrix products inside
``conv2d`` go through BLAS and are deterministic for a fixed thread count.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, NumericError, TrainingError

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True
_seq = itertools.count()


def set_precision(name: str) -> None:
    """Set the run-wide floating point precision ("float32" or "float64")."""
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigurationError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_precision() -> str:
    return np.dtype(_dtype).name


@contextlib.contextmanager
def precision(name: str):
    old = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Run forward ops without recording them for backward."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    """An n-d array node in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = -1
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise InputError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, out: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by {op}")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._op = op
    t._seq = next(_seq)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _check_dtypes(*ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise ConfigurationError(f"mixed precisions in one graph: {sorted(d.name for d in dts)}")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# ordered reductions

def ordered_sum(a: np.ndarray, axis=None) -> np.ndarray:
    """Sum with sequential ascending-index accumulation over ``axis``.

    ``axis`` may be None (all axes), an int or a tuple. Reduced axes are
    merged in row-major order, so the accumulation order is the ascending
    linear index of the reduced sub-array.
    """
    a = np.asarray(a)
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(sorted(ax % a.ndim for ax in axis))
    if not axes:
        return a.copy()
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    kept_shape = [a.shape[ax] for ax in keep]
    if a.size == 0:
        return np.zeros(kept_shape, dtype=a.dtype)
    k = len(axes)
    if axes == tuple(range(k)):
        # reduced axes lead: accumulate row by row without a transpose copy
        flat = a.reshape([-1] + kept_shape)
        return np.cumsum(flat, axis=0, dtype=a.dtype)[-1]
    moved = np.transpose(a, keep + list(axes))
    flat = moved.reshape(kept_shape + [-1])
    return np.cumsum(flat, axis=-1, dtype=a.dtype)[..., -1]


def ordered_mean(a: np.ndarray, axis=None) -> np.ndarray:
    a = np.asarray(a)
    s = ordered_sum(a, axis)
    count = a.size // max(s.size, 1) if a.size else 0
    return s / a.dtype.type(count)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and g.shape[lead + i] != 1:
            axes.append(lead + i)
    out = ordered_sum(g, tuple(axes)) if axes else g
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_dtypes(a, b)
    out = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_dtypes(a, b)
    out = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_dtypes(a, b)
    out = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result("mul", out, (a, b), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InputError(f"hadamard operands differ in shape: {a.shape} vs {b.shape}")
    return mul(a, b)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def backward(g):
        _accumulate(a, g * s)

    return _result("mul_scalar", out, (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = a.data + a.data.dtype.type(s)

    def backward(g):
        _accumulate(a, g)

    return _result("add_scalar", out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g):
        _accumulate(a, g * (a.data + a.data))

    return _result("square", out, (a,), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.data.dtype.type(0))

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _result("relu", out, (x,), backward)


def _sigmoid_array(z: np.ndarray) -> np.ndarray:
    one = z.dtype.type(1)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, one / (one + e), e / (one + e))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_array(x.data)

    def backward(g):
        _accumulate(x, g * out * (out.dtype.type(1) - out))

    return _result("sigmoid", out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and indexing

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(ordered_sum(x.data, axis))

    def backward(g):
        _accumulate(x, np.broadcast_to(_expand_like(g, x.shape, axis), x.shape))

    return _result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(ordered_mean(x.data, axis))
    count = x.data.size // max(out.size, 1)

    def backward(g):
        ge = _expand_like(g, x.shape, axis) / g.dtype.type(count)
        _accumulate(x, np.broadcast_to(ge, x.shape))

    return _result("mean", out, (x,), backward)


reduce_mean = mean


def _expand_like(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.reshape(g, (1,) * len(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    axes = sorted(ax % len(shape) for ax in axes)
    for ax in axes:
        g = np.expand_dims(g, ax)
    return g


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: [N,C,h,w] -> [N,C]."""
    if x.data.ndim != 4:
        raise InputError(f"global_avg_pool expects [N,C,h,w], got {x.shape}")
    return mean(x, axis=(2, 3))


def reduce_max_pixelwise(maps: Sequence[Tensor]) -> Tensor:
    """Pixelwise maximum over equally shaped maps; ties go to the earliest map."""
    if not maps:
        raise ConfigurationError("reduce_max_pixelwise needs at least one map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise InputError(f"map shapes differ: {shape} vs {m.shape}")
    _check_dtypes(*maps)
    stacked = np.stack([m.data for m in maps])
    idx = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, idx[None], axis=0)[0]

    def backward(g):
        for k, m in enumerate(maps):
            _accumulate(m, np.where(idx == k, g, g.dtype.type(0)))

    return _result("reduce_max_pixelwise", out, tuple(maps), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _result("reshape", out, (x,), backward)


def take_class(x: Tensor, labels) -> Tensor:
    """Select one channel per sample: [N,C,...] with labels[N] -> [N,...]."""
    labels = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if labels.shape != (n,):
        raise InputError(f"need {n} labels, got shape {labels.shape}")
    rows = np.arange(n)
    out = x.data[rows, labels].copy()

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, labels] = g
        _accumulate(x, full)

    return _result("take_class", out, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    _check_dtypes(*xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result("concat", out, tuple(xs), backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route to the lowest linear index."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigurationError(f"maxpool2d({size}) needs spatial dims divisible by {size}, got {h}x{w}")
    # window offsets in row-major order; strict '>' keeps the earliest maximum
    offsets = [(i, j) for i in range(size) for j in range(size)]
    out = np.ascontiguousarray(x.data[:, :, ::size, ::size])
    idx = np.zeros(out.shape, dtype=np.int8)
    for k, (i, j) in enumerate(offsets[1:], start=1):
        v = np.ascontiguousarray(x.data[:, :, i::size, j::size])
        better = v > out
        np.maximum(out, v, out=out)
        idx = np.where(better, np.int8(k), idx)

    def backward(g):
        gx = np.empty_like(x.data)
        for k, (i, j) in enumerate(offsets):
            gx[:, :, i::size, j::size] = g * (idx == k)
        _accumulate(x, gx)

    return _result("maxpool2d", out, (x,), backward)


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Channel-last patches: [N,H,W,C] -> [N*Ho*Wo, kh*kw*C] (patch order i, j, c)."""
    n, _, _, c = xh.shape
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an [Cout,Cin,kh,kw] kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ConfigurationError(f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigurationError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (cout,):
        raise ConfigurationError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    _check_dtypes(*parents)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xh = x.data.transpose(0, 2, 3, 1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xh.reshape(-1, cin)
    else:
        if padding:
            xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        cols = _im2col(xh, kh, kw, stride)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 += bias.data
    out = np.ascontiguousarray(out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        g2 = gh.reshape(-1, cout)
        if kernel.requires_grad:
            dw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
            _accumulate(kernel, dw)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, ordered_sum(g2, 0))
        if not x.requires_grad:
            return
        if pointwise:
            dx2 = g2 @ wmat
        elif stride == 1 and padding <= kh - 1 and padding <= kw - 1:
            # input gradient is a full correlation of g with the flipped kernel
            qh, qw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(gh, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
            dx2 = _im2col(gp, kh, kw, 1) @ wflip.T
        else:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            dx2 = dxp[:, padding:padding + h, padding:padding + w, :]
        _accumulate(x, dx2.reshape(n, h, w, cin).transpose(0, 3, 1, 2))

    return _result("conv2d", out, parents, backward)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise InputError(f"logits must be [N,C], got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise InputError(f"need {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ordered_sum(ez, 1)
    rows = np.arange(n)
    per_sample = np.log(se) - z[rows, labels]
    out = np.asarray(ordered_mean(per_sample))

    def backward(g):
        p = ez / se[:, None]
        p[rows, labels] -= 1
        _accumulate(logits, p * (g / p.dtype.type(n)))

    return _result("softmax_cross_entropy", out, (logits,), backward)


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    if a.shape != b.shape:
        raise InputError(f"mse_mean operands differ in shape: {a.shape} vs {b.shape}")
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# backward and optimisation

class GradientTape:
    """Operations reachable from a loss, in execution order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "GradientTape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def run(self, seed: np.ndarray) -> list[str]:
        """Propagate ``seed`` from the last node; return op names in visit order."""
        self.nodes[-1].grad = seed
        visited = []
        for node in reversed(self.nodes):
            visited.append(node._op)
            if node.grad is not None:
                node._backward(node.grad)
        return visited


def backward(loss: Tensor) -> GradientTape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
    if loss.data.size != 1:
        raise InputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    if not loss.requires_grad:
        return GradientTape([])
    tape = GradientTape.from_loss(loss)
    tape.run(np.ones_like(loss.data))
    # free intermediate buffers; leaves keep their grads
    for node in tape.nodes:
        node.grad = None
    return tape


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt``; zeros for non-participating tensors."""
    wrt = list(wrt)
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


class SGD:
    """Mini-batch SGD with momentum and L2 weight decay.

    v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {name!r}")
        for name, p in self.params.items():
            dt = p.data.dtype.type
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[name]
            v = dt(self.momentum) * v + (g + dt(self.weight_decay) * p.data)
            self.velocity[name] = v
            p.data = p.data - dt(self.lr) * v


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray] | None,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> dict[str, np.ndarray]:
    """Functional form of one SGD update; returns the new velocity buffers."""
    opt = SGD(params, lr, momentum, weight_decay)
    if velocity is not None:
        opt.velocity = {k: np.array(v, dtype=params[k].data.dtype) for k, v in velocity.items()}
    opt.step()
    return opt.velocity
