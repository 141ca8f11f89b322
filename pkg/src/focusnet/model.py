"""Two-branch FocusNet.

The attention branch is a plain conv encoder-decoder with concatenating skip
connections. The pre-ReLU output of each of its decoder stages, D_l, is turned
into a sigmoid gate that multiplies the first SE output of the matching
segmentation-branch encoder stage. The segmentation branch is built from
pre-activation residual blocks and SE blocks and ends in a 1x1 conv + sigmoid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import blocks as B
from .autodiff import DEFAULT_DTYPE, BatchNormState, Tensor, concat_channels, conv2d, dropout, elementwise, make_rng, sigmoid
from .exceptions import ConfigError, ContractError, ShapeError


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    encoder_widths: tuple = (32, 64, 128, 256)
    bottleneck_width: int = 512
    decoder_widths: tuple = (256, 128, 64, 32)
    se_ratio: int = 8
    dropout_rate: float = 0.2
    input_size: int = 256
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))

    @classmethod
    def standard(cls, in_channels=3, input_size=256) -> "ArchConfig":
        return cls(in_channels=in_channels, input_size=input_size)

    @classmethod
    def tiny(cls, in_channels=1, input_size=64, **overrides) -> "ArchConfig":
        fields = dict(encoder_widths=(4, 8), bottleneck_width=16, decoder_widths=(8, 4))
        fields.update(overrides)
        return cls(in_channels=in_channels, input_size=input_size, **fields)

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def violations(self) -> list[str]:
        problems = []
        if self.in_channels not in (1, 3):
            problems.append(f"in_channels must be 1 or 3, got {self.in_channels}")
        if not self.encoder_widths:
            problems.append("encoder_widths must not be empty")
        if len(self.decoder_widths) != len(self.encoder_widths):
            problems.append("decoder_widths must have the same length as encoder_widths")
        widths = (*self.encoder_widths, self.bottleneck_width, *self.decoder_widths)
        if any(w < 1 for w in widths):
            problems.append("all widths must be positive")
        if tuple(reversed(self.decoder_widths)) != self.encoder_widths:
            problems.append("decoder_widths must mirror encoder_widths so every gate aligns with its encoder stage")
        if self.se_ratio < 1:
            problems.append("se_ratio must be a positive integer")
        if not 0 <= self.dropout_rate < 1:
            problems.append("dropout_rate must lie in [0, 1)")
        if self.input_size < 1 or self.input_size % (2 ** self.depth):
            problems.append(f"input_size {self.input_size} is not divisible by 2^{self.depth} = {2 ** self.depth}")
        if self.bn_eps <= 0 or not 0 < self.bn_momentum <= 1:
            problems.append("bn_eps must be positive and bn_momentum in (0, 1]")
        return problems

    def validate(self) -> "ArchConfig":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ArchConfig: " + "; ".join(problems))
        return self

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        kwargs = {}
        known = {f for f in cls.__dataclass_fields__}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in known:
                raise ConfigError(f"unknown ArchConfig key {key!r}")
            kwargs[key] = _parse_field(key, value)
        return cls(**kwargs)


def _parse_field(key, value):
    if key in ("encoder_widths", "decoder_widths"):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if key in ("dropout_rate", "bn_eps", "bn_momentum"):
        return float(value)
    return int(value)


@dataclass
class SegEncoderStage:
    res1: B.ResidualBlockParams
    se1: B.SEBlockParams
    res2: B.ResidualBlockParams
    se2: B.SEBlockParams
    down: B.DownBlockParams


@dataclass
class SegBottleneck:
    res: B.ResidualBlockParams
    se: B.SEBlockParams


@dataclass
class SegDecoderStage:
    up: B.UpBlockParams
    res: B.ResidualBlockParams
    se: B.SEBlockParams


@dataclass
class AttentionBranch:
    enc: list
    down: list
    bottleneck: B.ConvStageParams
    up: list
    dec: list


@dataclass
class SegmentationBranch:
    enc: list
    bottleneck: SegBottleneck
    dec: list
    head: B.ConvParams


@dataclass
class FocusNetParams:
    cfg: ArchConfig
    attention: AttentionBranch
    segmentation: SegmentationBranch

    def tensors(self) -> dict[str, Tensor]:
        """Trainable tensors keyed by hierarchical name."""
        return {name: leaf for name, leaf in B.iter_named(self._branches()) if isinstance(leaf, Tensor)}

    def bn_states(self) -> dict[str, BatchNormState]:
        return {name: leaf for name, leaf in B.iter_named(self._branches()) if isinstance(leaf, BatchNormState)}

    def _branches(self):
        return _Branches(self.attention, self.segmentation)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors().values())

    @property
    def dtype(self):
        return self.segmentation.head.w.dtype

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to restore the model: tensors plus running mean/var."""
        out = {name: t.data for name, t in self.tensors().items()}
        for name, st in self.bn_states().items():
            out[f"{name}/mean"] = st.mean
            out[f"{name}/var"] = st.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ShapeError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, t in self.tensors().items():
            _assign(name, arrays[name], t.shape)
            t.data = np.array(arrays[name], dtype=t.dtype)
        for name, st in self.bn_states().items():
            _assign(f"{name}/mean", arrays[f"{name}/mean"], st.mean.shape)
            _assign(f"{name}/var", arrays[f"{name}/var"], st.var.shape)
            st.mean = np.array(arrays[f"{name}/mean"], dtype=st.mean.dtype)
            st.var = np.array(arrays[f"{name}/var"], dtype=st.var.dtype)


def _assign(name, array, shape):
    if tuple(np.shape(array)) != tuple(shape):
        raise ShapeError(f"shape mismatch for {name}", np.shape(array), shape)


@dataclass
class _Branches:
    attention: AttentionBranch
    segmentation: SegmentationBranch


@dataclass
class ForwardTrace:
    """Per-level feature maps, all indexed by encoder level (0 = full resolution)."""

    encoder: list = field(default_factory=list)     # E_l
    decoder: list = field(default_factory=list)     # D_l (pre-ReLU)
    gates: list = field(default_factory=list)       # sigmoid(D_l)
    features: list = field(default_factory=list)    # F_l, first SE output of the segmentation stage
    gated: list = field(default_factory=list)       # A_l
    prob: Tensor | None = None


def build(cfg: ArchConfig, rng=0, dtype=DEFAULT_DTYPE) -> FocusNetParams:
    """Allocate and He-initialise every parameter; deterministic for a given seed."""
    cfg.validate()
    rng = make_rng(rng)
    enc, bott, dec = cfg.encoder_widths, cfg.bottleneck_width, cfg.decoder_widths
    L = cfg.depth

    att_enc, att_down, att_up, att_dec = [], [], [], []
    cin = cfg.in_channels
    for w in enc:
        att_enc.append(B.init_conv_stage(rng, cin, w, dtype))
        att_down.append(B.init_down(rng, w, w, dtype))
        cin = w
    att_bottleneck = B.init_conv_stage(rng, cin, bott, dtype)
    cin = bott
    for j, w in enumerate(dec):
        skip = enc[L - 1 - j]
        att_up.append(B.init_up(rng, cin, w, dtype))
        att_dec.append(B.init_conv_stage(rng, skip + w, w, dtype))
        cin = w
    attention = AttentionBranch(att_enc, att_down, att_bottleneck, att_up, att_dec)

    seg_enc, seg_dec = [], []
    cin = cfg.in_channels
    for w in enc:
        seg_enc.append(SegEncoderStage(
            res1=B.init_residual(rng, cin, w, dtype),
            se1=B.init_se(rng, w, cfg.se_ratio, dtype),
            res2=B.init_residual(rng, w, w, dtype),
            se2=B.init_se(rng, w, cfg.se_ratio, dtype),
            down=B.init_down(rng, w, w, dtype),
        ))
        cin = w
    seg_bottleneck = SegBottleneck(B.init_residual(rng, cin, bott, dtype), B.init_se(rng, bott, cfg.se_ratio, dtype))
    cin = bott
    for j, w in enumerate(dec):
        skip = enc[L - 1 - j]
        seg_dec.append(SegDecoderStage(
            up=B.init_up(rng, cin, w, dtype),
            res=B.init_residual(rng, skip + w, w, dtype),
            se=B.init_se(rng, w, cfg.se_ratio, dtype),
        ))
        cin = w
    head = B.init_conv(rng, cin, 1, 1, dtype)
    segmentation = SegmentationBranch(seg_enc, seg_bottleneck, seg_dec, head)
    return FocusNetParams(cfg, attention, segmentation)


def _stage_error(stage, a, b):
    return ShapeError(f"resolution/width misalignment at {stage}", a, b)


def forward(p: FocusNetParams, x: Tensor, mode="eval", rng=None, gating="sigmoid"):
    """Run both branches and return ``(prob, trace)``.

    ``gating`` selects the junction wiring: ``"sigmoid"`` (the model),
    ``"ones"`` (gates replaced by the constant 1) or ``"skip"`` (no junction);
    the last two exist for wiring tests.
    """
    cfg = p.cfg
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=p.dtype)
    if x.dtype != p.dtype:
        x = Tensor(x.data.astype(p.dtype))
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError("input does not match ArchConfig at stage 'input'", x.shape, (x.shape[0] if x.ndim else 0, *expected))
    if mode == "train" and cfg.dropout_rate > 0 and rng is None:
        raise ContractError("train-mode forward needs an rng for dropout")
    if gating not in ("sigmoid", "ones", "skip"):
        raise ValueError(f"unknown gating {gating!r}")
    ctx = B.BlockContext(mode, cfg.bn_eps, cfg.bn_momentum)
    rate = cfg.dropout_rate
    L = cfg.depth
    trace = ForwardTrace()

    # attention branch
    att = p.attention
    h = x
    for level in range(L):
        h = B.conv_stage(h, att.enc[level], ctx)
        trace.encoder.append(h)
        h = B.down_block(h, att.down[level], ctx)
    h = B.conv_stage(h, att.bottleneck, ctx)
    decoded = [None] * L
    for j in range(L):
        level = L - 1 - j
        h = B.up_block(h, att.up[j], ctx)
        h = B.skip_concat(trace.encoder[level], h)
        h, decoded[level] = B.conv_stage(h, att.dec[j], ctx, tap=True)
    trace.decoder = decoded

    # segmentation branch
    seg = p.segmentation
    s = x
    skips = []
    for level, stage in enumerate(seg.enc):
        f = B.se_block(B.preact_residual_block(s, stage.res1, ctx), stage.se1)
        d = decoded[level]
        if f.shape != d.shape:
            raise _stage_error(f"segmentation encoder level {level}", f.shape, d.shape)
        trace.features.append(f)
        if gating == "sigmoid":
            a, gate = B.gated_multiply(f, d, return_gate=True)
        elif gating == "ones":
            gate = Tensor(np.ones(f.shape, dtype=f.dtype))
            a = elementwise(f, gate, "mul")
        else:
            a, gate = f, None
        trace.gates.append(gate)
        trace.gated.append(a)
        s = B.se_block(B.preact_residual_block(a, stage.res2, ctx), stage.se2)
        s = dropout(s, rate, mode, rng)
        skips.append(s)
        s = B.down_block(s, stage.down, ctx)

    s = B.se_block(B.preact_residual_block(s, seg.bottleneck.res, ctx), seg.bottleneck.se)
    s = dropout(s, rate, mode, rng)
    for j, stage in enumerate(seg.dec):
        level = L - 1 - j
        s = B.up_block(s, stage.up, ctx)
        s = B.skip_concat(skips[level], s)
        s = B.se_block(B.preact_residual_block(s, stage.res, ctx), stage.se)
        s = dropout(s, rate, mode, rng)

    prob = sigmoid(conv2d(s, seg.head.w, seg.head.b, 1, "same"))
    trace.prob = prob
    return prob, trace


# ---------------------------------------------------------------------------
# parameter ledger


def conv_param_count(cin, cout, k):
    return cin * cout * k * k + cout


def _bn_count(c):
    return 2 * c


def _dense_count(cin, cout):
    return cin * cout + cout


def _conv_stage_count(cin, cout):
    return conv_param_count(cin, cout, 3) + _bn_count(cout) + conv_param_count(cout, cout, 3) + _bn_count(cout)


def _residual_count(cin, cout):
    n = _bn_count(cin) + conv_param_count(cin, cout, 3) + _bn_count(cout) + conv_param_count(cout, cout, 3)
    if cin != cout:
        n += conv_param_count(cin, cout, 1)
    return n


def _se_count(c, ratio):
    hidden = B.se_hidden(c, ratio)
    return _dense_count(c, hidden) + _dense_count(hidden, c)


def param_count(cfg: ArchConfig) -> tuple[int, list[tuple[str, int]]]:
    """Closed-form trainable-parameter count with a per-layer ledger.

    Ledger names are the hierarchical prefixes used by :func:`build`.
    """
    cfg.validate()
    enc, bott, dec, r = cfg.encoder_widths, cfg.bottleneck_width, cfg.decoder_widths, cfg.se_ratio
    L = cfg.depth
    ledger = []
    cin = cfg.in_channels
    for i, w in enumerate(enc):
        ledger.append((f"attention/enc/{i}", _conv_stage_count(cin, w)))
        ledger.append((f"attention/down/{i}", conv_param_count(w, w, 3) + _bn_count(w)))
        cin = w
    ledger.append(("attention/bottleneck", _conv_stage_count(cin, bott)))
    cin = bott
    for j, w in enumerate(dec):
        ledger.append((f"attention/up/{j}", conv_param_count(cin, w, 2) + _bn_count(w)))
        ledger.append((f"attention/dec/{j}", _conv_stage_count(enc[L - 1 - j] + w, w)))
        cin = w

    cin = cfg.in_channels
    for i, w in enumerate(enc):
        ledger.append((f"segmentation/enc/{i}/res1", _residual_count(cin, w)))
        ledger.append((f"segmentation/enc/{i}/se1", _se_count(w, r)))
        ledger.append((f"segmentation/enc/{i}/res2", _residual_count(w, w)))
        ledger.append((f"segmentation/enc/{i}/se2", _se_count(w, r)))
        ledger.append((f"segmentation/enc/{i}/down", conv_param_count(w, w, 3) + _bn_count(w)))
        cin = w
    ledger.append(("segmentation/bottleneck/res", _residual_count(cin, bott)))
    ledger.append(("segmentation/bottleneck/se", _se_count(bott, r)))
    cin = bott
    for j, w in enumerate(dec):
        ledger.append((f"segmentation/dec/{j}/up", conv_param_count(cin, w, 2) + _bn_count(w)))
        ledger.append((f"segmentation/dec/{j}/res", _residual_count(enc[L - 1 - j] + w, w)))
        ledger.append((f"segmentation/dec/{j}/se", _se_count(w, r)))
        cin = w
    ledger.append(("segmentation/head", conv_param_count(cin, 1, 1)))
    return sum(n for _, n in ledger), ledger
