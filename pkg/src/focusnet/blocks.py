"""Composite layers: SE block, pre-activation residual block, conv stages,
strided down-sampling, transposed-conv up-sampling and the sigmoid gate.

Each block is a plain function over a params dataclass. Params are built by
the matching ``init_*`` helper with He-normal weights, zero biases/betas and
unit gammas.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from .autodiff import (
    DEFAULT_DTYPE,
    BatchNormState,
    Tensor,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv2d_transpose,
    dense,
    elementwise,
    global_avg_pool,
    relu,
    sigmoid,
)
from .exceptions import GeometryError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class DenseParams:
    w: Tensor
    b: Tensor


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    state: BatchNormState


@dataclass
class SEBlockParams:
    reduce: DenseParams
    expand: DenseParams

    @property
    def hidden(self) -> int:
        return self.reduce.w.shape[1]


@dataclass
class ResidualBlockParams:
    bn1: BatchNormParams
    conv1: ConvParams
    bn2: BatchNormParams
    conv2: ConvParams
    projection: ConvParams | None = None


@dataclass
class ConvStageParams:
    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams


@dataclass
class DownBlockParams:
    conv: ConvParams
    bn: BatchNormParams


@dataclass
class UpBlockParams:
    conv: ConvParams
    bn: BatchNormParams


@dataclass
class BlockContext:
    """Forward-pass settings shared by every block of one call."""

    mode: str = "eval"
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM


def iter_named(obj, prefix=""):
    """Yield ``(name, leaf)`` over nested params; leaves are Tensors and BatchNormStates."""
    if obj is None:
        return
    if isinstance(obj, (Tensor, BatchNormState)):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_named(item, f"{prefix}/{i}" if prefix else str(i))
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from iter_named(getattr(obj, f.name), f"{prefix}/{f.name}" if prefix else f.name)


# ---------------------------------------------------------------------------
# initialisation


def he_normal(rng, shape, fan_in, dtype=DEFAULT_DTYPE) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(shape) * std).astype(dtype))


def _zeros(n, dtype):
    return Tensor(np.zeros(n, dtype=dtype))


def init_conv(rng, cin, cout, k=3, dtype=DEFAULT_DTYPE) -> ConvParams:
    return ConvParams(he_normal(rng, (cout, cin, k, k), cin * k * k, dtype), _zeros(cout, dtype))


def init_conv_transpose(rng, cin, cout, k=2, stride=2, dtype=DEFAULT_DTYPE) -> ConvParams:
    # each output pixel sees cin * (k / stride)^2 inputs
    fan_in = max(1.0, cin * k * k / (stride * stride))
    return ConvParams(he_normal(rng, (cin, cout, k, k), fan_in, dtype), _zeros(cout, dtype))


def init_dense(rng, cin, cout, dtype=DEFAULT_DTYPE) -> DenseParams:
    return DenseParams(he_normal(rng, (cin, cout), cin, dtype), _zeros(cout, dtype))


def init_bn(channels, dtype=DEFAULT_DTYPE) -> BatchNormParams:
    return BatchNormParams(
        Tensor(np.ones(channels, dtype=dtype)),
        _zeros(channels, dtype),
        BatchNormState.fresh(channels, dtype),
    )


def se_hidden(channels: int, ratio: int) -> int:
    return max(1, channels // ratio)


def init_se(rng, channels, ratio=8, dtype=DEFAULT_DTYPE) -> SEBlockParams:
    hidden = se_hidden(channels, ratio)
    return SEBlockParams(init_dense(rng, channels, hidden, dtype), init_dense(rng, hidden, channels, dtype))


def init_residual(rng, cin, cout, dtype=DEFAULT_DTYPE) -> ResidualBlockParams:
    return ResidualBlockParams(
        bn1=init_bn(cin, dtype),
        conv1=init_conv(rng, cin, cout, 3, dtype),
        bn2=init_bn(cout, dtype),
        conv2=init_conv(rng, cout, cout, 3, dtype),
        projection=init_conv(rng, cin, cout, 1, dtype) if cin != cout else None,
    )


def init_conv_stage(rng, cin, cout, dtype=DEFAULT_DTYPE) -> ConvStageParams:
    return ConvStageParams(
        init_conv(rng, cin, cout, 3, dtype), init_bn(cout, dtype),
        init_conv(rng, cout, cout, 3, dtype), init_bn(cout, dtype),
    )


def init_down(rng, cin, cout, dtype=DEFAULT_DTYPE) -> DownBlockParams:
    return DownBlockParams(init_conv(rng, cin, cout, 3, dtype), init_bn(cout, dtype))


def init_up(rng, cin, cout, dtype=DEFAULT_DTYPE) -> UpBlockParams:
    return UpBlockParams(init_conv_transpose(rng, cin, cout, 2, 2, dtype), init_bn(cout, dtype))


# ---------------------------------------------------------------------------
# blocks


def _bn(x, p: BatchNormParams, ctx: BlockContext):
    return batchnorm2d(x, p.gamma, p.beta, p.state, ctx.mode, ctx.eps, ctx.momentum)


def _ctx(mode) -> BlockContext:
    if isinstance(mode, BlockContext):
        return mode
    return BlockContext(mode=mode)


def se_block(x: Tensor, p: SEBlockParams, mode="eval", return_gate=False):
    """Squeeze (global average pool) and excite (dense-relu-dense-sigmoid) channel gating."""
    if x.ndim != 4 or x.shape[1] != p.reduce.w.shape[0]:
        raise ShapeError("se_block channel mismatch", x.shape, p.reduce.w.shape)
    squeezed = global_avg_pool(x)
    hidden = relu(dense(squeezed, p.reduce.w, p.reduce.b))
    gate = sigmoid(dense(hidden, p.expand.w, p.expand.b))
    y = elementwise(x, gate, "mul")
    return (y, gate) if return_gate else y


def preact_residual_block(x: Tensor, p: ResidualBlockParams, mode="eval") -> Tensor:
    """shortcut(x) + conv(relu(bn(conv(relu(bn(x)))))); projection shortcut iff channels change."""
    ctx = _ctx(mode)
    cin, cout = p.conv1.w.shape[1], p.conv2.w.shape[0]
    if x.ndim != 4 or x.shape[1] != cin:
        raise ShapeError("residual block input channels", x.shape, p.conv1.w.shape)
    h = conv2d(relu(_bn(x, p.bn1, ctx)), p.conv1.w, p.conv1.b, 1, "same")
    h = conv2d(relu(_bn(h, p.bn2, ctx)), p.conv2.w, p.conv2.b, 1, "same")
    if p.projection is None:
        if cin != cout:
            raise ShapeError("channel-changing residual block needs a projection", x.shape, p.conv2.w.shape)
        shortcut = x
    else:
        shortcut = conv2d(x, p.projection.w, p.projection.b, 1, "same")
    return elementwise(shortcut, h, "add")


def conv_stage(x: Tensor, p: ConvStageParams, mode="eval", tap=False):
    """Plain (conv-bn-relu) x 2. With ``tap`` also return the last pre-ReLU map."""
    ctx = _ctx(mode)
    if x.ndim != 4 or x.shape[1] != p.conv1.w.shape[1]:
        raise ShapeError("conv stage input channels", x.shape, p.conv1.w.shape)
    h = relu(_bn(conv2d(x, p.conv1.w, p.conv1.b, 1, "same"), p.bn1, ctx))
    pre = _bn(conv2d(h, p.conv2.w, p.conv2.b, 1, "same"), p.bn2, ctx)
    out = relu(pre)
    return (out, pre) if tap else out


def gated_multiply(f: Tensor, d: Tensor, return_gate=False):
    """A = f * sigmoid(d)."""
    if f.shape != d.shape:
        raise ShapeError("gated_multiply operands differ", f.shape, d.shape)
    gate = sigmoid(d)
    a = elementwise(f, gate, "mul")
    return (a, gate) if return_gate else a


def down_block(x: Tensor, p: DownBlockParams, mode="eval") -> Tensor:
    """Stride-2 3x3 conv, BN, ReLU; exactly halves H and W."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise GeometryError(f"down_block needs even spatial dims, got {tuple(x.shape)}")
    ctx = _ctx(mode)
    return relu(_bn(conv2d(x, p.conv.w, p.conv.b, 2, "same"), p.bn, ctx))


def up_block(x: Tensor, p: UpBlockParams, mode="eval") -> Tensor:
    """2x2 stride-2 transposed conv, BN, ReLU; exactly doubles H and W."""
    if x.ndim != 4 or x.shape[1] != p.conv.w.shape[0]:
        raise ShapeError("up_block input channels", x.shape, p.conv.w.shape)
    ctx = _ctx(mode)
    return relu(_bn(conv2d_transpose(x, p.conv.w, p.conv.b, 2), p.bn, ctx))


def skip_concat(skip: Tensor, upsampled: Tensor) -> Tensor:
    if skip.shape[2:] != upsampled.shape[2:]:
        raise ShapeError("skip connection resolution mismatch", skip.shape, upsampled.shape)
    return concat_channels(skip, upsampled)
