"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive takes and returns :class:`Tensor` values backed by numpy
arrays in N x C x H x W layout. When a :class:`Tape` is active the primitive
records a node carrying its backward rule; :func:`backward` replays the tape in
reverse to accumulate gradients.

    >>> w = Tensor([1.0, 2.0], dtype=np.float64)
    >>> with Tape() as tape:
    ...     loss = sum_all(elementwise(w, Tensor([3.0, 4.0], dtype=np.float64), "mul"))
    >>> backward(loss, tape, {"w": w})["w"]
    array([3., 4.])
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (
    ContractError,
    DegenerateStatisticsError,
    GeometryError,
    ParameterError,
    ShapeError,
)

DEFAULT_DTYPE = np.float32

_uids = itertools.count()
_active_tapes: list["Tape"] = []
_backward_overrides: dict[str, Callable] = {}
_relu_watchers: list[list] = []

GradientSet = dict


class Tensor:
    """Immutable-by-convention wrapper around a floating-point ndarray."""

    __slots__ = ("data", "uid", "name")

    def __init__(self, data, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.uid = next(_uids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __deepcopy__(self, memo):
        # a copy is a new value and must not share the uid tapes key on
        return Tensor(self.data.copy(), name=self.name)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return elementwise(self, _as_tensor(other, self.dtype), "add")

    def __mul__(self, other):
        return elementwise(self, _as_tensor(other, self.dtype), "mul")


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=dtype), ()).copy(), dtype=dtype)


@dataclass
class Node:
    op: str
    inputs: tuple
    output_uid: int
    backward: Callable


@dataclass
class Tape:
    """Ordered record of executed primitives. Use as a context manager."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def produced(self, tensor: Tensor) -> bool:
        return any(node.output_uid == tensor.uid for node in self.nodes)

    @property
    def ops(self) -> list[str]:
        return [node.op for node in self.nodes]


def record(op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn: Callable) -> Tensor:
    """Register ``out`` as produced by ``op`` on the active tape, if any.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    input (``None`` for inputs that receive no gradient).
    """
    if _active_tapes:
        _active_tapes[-1].nodes.append(Node(op, tuple(inputs), out.uid, backward_fn))
    return out


@contextlib.contextmanager
def override_backward(op: str, transform: Callable) -> Iterator[None]:
    """Temporarily post-process the input gradients produced by ``op``.

    ``transform`` receives the tuple of input gradients and returns a
    replacement. Test hook for proving that the gradient suite catches a
    broken rule.
    """
    _backward_overrides[op] = transform
    try:
        yield
    finally:
        _backward_overrides.pop(op, None)


def backward(loss: Tensor, tape: Tape, wrt=None):
    """Accumulate d(loss)/d(t) for every tensor reachable on ``tape``.

    ``wrt`` may be a mapping name -> Tensor (returns a dict keyed by name), a
    sequence of tensors (returns a list) or None (returns a dict keyed by
    tensor uid). Tensors the loss does not depend on receive zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_uid)
        if g is None:
            continue
        in_grads = node.backward(g)
        override = _backward_overrides.get(node.op)
        if override is not None:
            in_grads = override(in_grads)
        for tensor, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if tensor.uid in grads:
                grads[tensor.uid] = grads[tensor.uid] + gi
            else:
                grads[tensor.uid] = gi

    def lookup(t: Tensor) -> np.ndarray:
        g = grads.get(t.uid)
        return np.zeros_like(t.data) if g is None else g

    if wrt is None:
        return grads
    if isinstance(wrt, Mapping):
        return {name: lookup(t) for name, t in wrt.items()}
    return [lookup(t) for t in wrt]


# ---------------------------------------------------------------------------
# random state


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 generator; the stream is identical on every platform."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent substream for ``(seed, *keys)``, e.g. (seed, sample, epoch)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# convolution


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """(pad_before, pad_after, output_size) for ``same`` padding.

    Output size is ceil(size / stride); any odd leftover pixel goes after.
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def _conv_geometry(h, w, k, stride, padding):
    if padding == "same":
        pt, pb, oh = same_padding(h, k, stride)
        pl, pr, ow = same_padding(w, k, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        oh = (h - k) // stride + 1 if h >= k else 0
        ow = (w - k) // stride + 1 if w >= k else 0
    else:
        raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")
    if oh <= 0 or ow <= 0:
        raise GeometryError(f"convolution of {h}x{w} with k={k}, stride={stride}, {padding} gives an empty output")
    return (pt, pb, pl, pr), (oh, ow)


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # N, C, oh, ow, k, k


def _scatter_windows(cols: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`; ``cols`` is N, oh, ow, C, k, k."""
    _, oh, ow = cols.shape[:3]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _check_conv_args(x, w, b, stride, in_axis):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv expects 4-d input and weight", x.shape, w.shape)
    if w.shape[2] != w.shape[3] or w.shape[2] < 1:
        raise ShapeError("kernel must be square", w.shape)
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError("input channels do not match weight", x.shape, w.shape)
    out_channels = w.shape[1 - in_axis]
    if b is not None and b.shape != (out_channels,):
        raise ShapeError("bias does not match output channels", b.shape, w.shape)
    if int(stride) != stride or stride < 1:
        raise ParameterError(f"stride must be a positive integer, got {stride}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``w`` [O,C,k,k] plus bias."""
    _check_conv_args(x, w, b, stride, in_axis=1)
    n, c, h, wd = x.shape
    k = w.shape[2]
    (pt, pb, pl, pr), (oh, ow) = _conv_geometry(h, wd, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(xp, k, stride, oh, ow)
    y = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(y, dtype=x.dtype))

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, w.data, axes=([1], [0]))  # N, oh, ow, C, k, k
        gxp = _scatter_windows(cols, xp.shape, k, stride)
        gx = gxp[:, :, pt:pt + h, pl:pl + wd]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, out, grad_fn)


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution of ``x`` [N,C,H,W] with ``w`` [C,O,k,k].

    Defined as the exact adjoint (in x) of ``conv2d(., w, stride, "same")``
    acting on an input of size H*stride, so the output is N x O x H*s x W*s.
    """
    _check_conv_args(x, w, b, stride, in_axis=0)
    n, c, h, wd = x.shape
    k = w.shape[2]
    oh, ow = h * stride, wd * stride
    pt, pb, _ = same_padding(oh, k, stride)
    pl, pr, _ = same_padding(ow, k, stride)
    padded_shape = (n, w.shape[1], oh + pt + pb, ow + pl + pr)
    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # N, H, W, O, k, k
    full = _scatter_windows(cols, padded_shape, k, stride)
    y = full[:, :, pt:pt + oh, pl:pl + ow]
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(y, dtype=x.dtype))

    def grad_fn(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = _windows(gp, k, stride, h, wd)  # N, O, H, W, k, k
        gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d_transpose", inputs, out, grad_fn)


# ---------------------------------------------------------------------------
# pointwise


def _sigmoid(z: np.ndarray) -> np.ndarray:
    s = np.exp(-np.logaddexp(0.0, -z))
    # keep the result strictly inside (0, 1) even where it rounds to 0 or 1
    info = np.finfo(z.dtype)
    return np.clip(s, info.tiny, np.nextafter(z.dtype.type(1), z.dtype.type(0))).astype(z.dtype, copy=False)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    for watcher in _relu_watchers:
        watcher.append(mask)
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return record("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)
    return record("sigmoid", (x,), out, lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """``a * b`` or ``a + b``; ``b`` may also be [N,C] broadcast over H,W of a 4-d ``a``."""
    if kind not in ("mul", "add"):
        raise ParameterError(f"unknown elementwise kind {kind!r}")
    if a.shape == b.shape:
        bd, reduce_b = b.data, None
    elif a.ndim == 4 and b.shape == a.shape[:2]:
        bd, reduce_b = b.data[:, :, None, None], (2, 3)
    elif b.ndim == 0:
        bd, reduce_b = b.data, tuple(range(a.ndim))
    else:
        raise ShapeError(f"cannot combine operands with '{kind}'", a.shape, b.shape)

    ad = a.data
    if kind == "mul":
        out = Tensor(ad * bd)

        def grad_fn(g):
            ga = g * bd
            gb = g * ad
            return ga, gb if reduce_b is None else gb.sum(axis=reduce_b)
    else:
        out = Tensor(ad + bd)

        def grad_fn(g):
            return g, g if reduce_b is None else g.sum(axis=reduce_b)

    return record(f"elementwise_{kind}", (a, b), out, grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# normalisation and pooling


@dataclass
class BatchNormState:
    """Running per-channel statistics, replaced (never mutated) on update."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalisation.

    Train mode normalises with the biased batch variance over N,H,W and moves
    the running statistics as ``new = (1 - momentum) * old + momentum * batch``.
    Eval mode normalises with the running statistics.
    """
    if x.ndim != 4:
        raise ShapeError("batchnorm2d expects a 4-d input", x.shape)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must match channels", gamma.shape, x.shape)
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    xd = x.data
    g4 = gamma.data[None, :, None, None]

    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DegenerateStatisticsError(f"batch statistics need at least 2 values per channel, got {count}")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
        state.mean = ((1 - momentum) * state.mean + momentum * mean).astype(state.mean.dtype)
        state.var = ((1 - momentum) * state.var + momentum * var).astype(state.var.dtype)

        def grad_fn(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * g4
            gx = (inv_std[None, :, None, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
            return gx, ggamma, gbeta
    else:
        inv_std = 1.0 / np.sqrt(state.var.astype(xd.dtype) + eps)
        xhat = (xd - state.mean.astype(xd.dtype)[None, :, None, None]) * inv_std[None, :, None, None]

        def grad_fn(g):
            return (
                g * g4 * inv_std[None, :, None, None],
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    out = Tensor((xhat * g4 + beta.data[None, :, None, None]).astype(xd.dtype, copy=False))
    return record("batchnorm2d", (x, gamma, beta), out, grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-d input", x.shape)
    h, w = x.shape[2:]
    out = Tensor(x.data.mean(axis=(2, 3)))

    def grad_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return record("global_avg_pool", (x,), out, grad_fn)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError("dense inner dimensions disagree", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("dense bias does not match output width", b.shape, w.shape)
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def grad_fn(g):
        return g @ w.data.T, x.data.T @ g, (g.sum(axis=0) if b is not None else None)

    inputs = (x, w) if b is None else (x, w, b)
    return record("dense", inputs, out, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError("concat_channels needs equal N, H, W", a.shape, b.shape)
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; eval mode (or rate 0) returns ``x`` unchanged."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.dtype) * scale
    out = Tensor(x.data * mask)
    return record("dropout", (x,), out, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# verification


@contextlib.contextmanager
def watch_relu_masks() -> Iterator[list]:
    """Collect the on/off mask of every ReLU evaluated inside the block."""
    masks: list = []
    _relu_watchers.append(masks)
    try:
        yield masks
    finally:
        _relu_watchers.remove(masks)


def _same_masks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-4,
    coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    report: dict | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must read ``params`` (whose arrays
    are perturbed in place between calls) and return a scalar tensor. Error
    per coordinate is |a - n| / max(1e-8, |a| + |n|).

    A coordinate whose +/- step flips any ReLU relative to the unperturbed
    pass sits on a kink, where the central difference is not a derivative; it
    is skipped and counted in ``report["kink_skipped"]``. ``coords_per_tensor``
    checks a random subset of each tensor instead of every coordinate.
    """
    for t in params.values():
        t.data = np.array(t.data, copy=True)
    with Tape() as tape, watch_relu_masks() as base_masks:
        loss = f()
    analytic = backward(loss, tape, params)
    rng = make_rng(0) if rng is None else rng

    worst = 0.0
    checked = skipped = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        if coords_per_tensor is None or coords_per_tensor >= flat.size:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=coords_per_tensor, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            with watch_relu_masks() as up_masks:
                up = float(f().item())
            flat[i] = orig - step
            with watch_relu_masks() as down_masks:
                down = float(f().item())
            flat[i] = orig
            if base_masks and not (_same_masks(base_masks, up_masks) and _same_masks(base_masks, down_masks)):
                skipped += 1
                continue
            checked += 1
            numeric = (up - down) / (2 * step)
            a = float(ga[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    if report is not None:
        report.update(checked=checked, kink_skipped=skipped)
    return worst
