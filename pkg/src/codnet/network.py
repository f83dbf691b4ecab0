"""Network graph: backbone stub, DMC and MIF blocks, deep-supervision heads.

Forward functions take an ``ops`` namespace: the :mod:`codnet.tensor` module
for plain inference, or an :class:`codnet.autograd.Tape` for training and
gradient checks. Parameter containers hold either arrays or tape variables.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, ShapeError

# -- parameter containers ----------------------------------------------------


@dataclass(frozen=True)
class Conv:
    weight: Any
    bias: Any
    spec: ConvSpec


@dataclass(frozen=True)
class CBR:
    """3x3 conv, batch norm, ReLU."""

    conv: Conv
    gamma: Any
    beta: Any
    running_mean: Any
    running_var: Any


@dataclass(frozen=True)
class DmcParams:
    entry: Conv
    top_reduce: Conv
    top_row: Conv  # 1 x 5
    top_col: Conv  # 5 x 1
    bottom_reduce: Conv
    bottom_row: Conv  # 1 x 7
    bottom_col: Conv  # 7 x 1
    top_dilated: Conv  # 3 x 3, rate 5
    bottom_dilated: Conv  # 3 x 3, rate 7
    exit: Conv

    @property
    def in_channels(self) -> int:
        return self.entry.spec.in_channels

    @property
    def out_channels(self) -> int:
        return self.exit.spec.out_channels


@dataclass(frozen=True)
class MifParams:
    low_cbr: CBR
    high_cbr: CBR
    low_fuse: Conv  # 1x1, 2 -> 1
    high_fuse: Conv
    high_out_cbr: CBR
    out_cbr: CBR


@dataclass(frozen=True)
class BackboneStub:
    stages: tuple  # four Conv blocks, strides 4, 8, 16, 32 overall


@dataclass(frozen=True)
class NetConfig:
    channels: int = 32
    in_channels: int = 3
    backbone_channels: tuple = (64, 128, 256, 512)
    top_kernel: int = 5
    bottom_kernel: int = 7
    top_rate: int = 5
    bottom_rate: int = 7
    bn_eps: float = 1e-5
    bn_training: bool = False


@dataclass(frozen=True)
class McifNet:
    config: NetConfig
    backbone: BackboneStub
    dmc: tuple  # 4 x DmcParams
    mif: tuple  # 3 x MifParams, index j-1 for the j-th module
    heads: tuple  # 4 x Conv (1x1, C -> 1)


@dataclass
class FeaturePyramid:
    x: list
    xd: list
    xm: list
    xa: list


@dataclass
class PredictionSet:
    p: list  # logits at input resolution, one per level

    def probabilities(self):
        return [T.sigmoid(np.asarray(getattr(v, "value", v))) for v in self.p]


# -- parameter traversal -------------------------------------------------------

_BUFFERS = ("running_mean", "running_var")


def _walk(obj, prefix):
    if isinstance(obj, tuple):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, (ConvSpec, NetConfig)):
        for f in dataclasses.fields(obj):
            if f.name == "config":
                continue
            yield from _walk(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif obj is not None and not isinstance(obj, (ConvSpec, NetConfig)):
        yield prefix, obj


def named_arrays(net: McifNet):
    """(name, array) pairs for every parameter and buffer, in a fixed order."""
    return list(_walk(net, ""))


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _BUFFERS


def _rebuild(obj, prefix, fn):
    if isinstance(obj, tuple):
        return tuple(_rebuild(item, f"{prefix}.{i}" if prefix else str(i), fn) for i, item in enumerate(obj))
    if dataclasses.is_dataclass(obj) and not isinstance(obj, (ConvSpec, NetConfig)):
        changes = {}
        for f in dataclasses.fields(obj):
            if f.name == "config":
                continue
            changes[f.name] = _rebuild(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name, fn)
        return dataclasses.replace(obj, **changes)
    if obj is None or isinstance(obj, (ConvSpec, NetConfig)):
        return obj
    return fn(prefix, obj)


def map_arrays(net, fn):
    """Return a copy of ``net`` (or any parameter container) with ``fn(name, array)`` applied."""
    return _rebuild(net, "", fn)


def state_dict(net: McifNet) -> dict:
    return {name: np.asarray(arr) for name, arr in named_arrays(net)}


def load_state(net: McifNet, state: dict) -> McifNet:
    expected = dict(named_arrays(net))
    missing = set(expected) - set(state)
    extra = set(state) - set(expected)
    if missing or extra:
        raise KeyError(f"weight names differ: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")

    def take(name, arr):
        new = np.asarray(state[name])
        if new.shape != np.shape(arr):
            raise ShapeError(f"{name}: archive shape {new.shape} != model shape {np.shape(arr)}")
        return new

    return map_arrays(net, take)


def attach(net: McifNet, tape):
    """Wrap trainable arrays as tape leaves; buffers stay constant arrays."""
    return map_arrays(net, lambda name, arr: arr if is_buffer(name) else tape.leaf(arr, name))


# -- initialization ----------------------------------------------------------


def _conv(rng, spec: ConvSpec, dtype) -> Conv:
    return Conv(T.kaiming_uniform(rng, spec.weight_shape, dtype), np.zeros(spec.out_channels, dtype), spec)


def _cbr(rng, cin, cout, dtype) -> CBR:
    return CBR(
        _conv(rng, ConvSpec.same(3, 3, cin, cout), dtype),
        gamma=np.ones(cout, dtype),
        beta=np.zeros(cout, dtype),
        running_mean=np.zeros(cout, dtype),
        running_var=np.ones(cout, dtype),
    )


def init_dmc(rng, in_channels, channels, cfg: NetConfig = NetConfig(), dtype=T.DEFAULT_DTYPE) -> DmcParams:
    c, n1, n2 = channels, cfg.top_kernel, cfg.bottom_kernel
    same = ConvSpec.same
    return DmcParams(
        entry=_conv(rng, same(3, 3, in_channels, c), dtype),
        top_reduce=_conv(rng, same(1, 1, c, c), dtype),
        top_row=_conv(rng, same(1, n1, c, c), dtype),
        top_col=_conv(rng, same(n1, 1, c, c), dtype),
        bottom_reduce=_conv(rng, same(1, 1, c, c), dtype),
        bottom_row=_conv(rng, same(1, n2, c, c), dtype),
        bottom_col=_conv(rng, same(n2, 1, c, c), dtype),
        top_dilated=_conv(rng, same(3, 3, c, c, dilation=cfg.top_rate), dtype),
        bottom_dilated=_conv(rng, same(3, 3, c, c, dilation=cfg.bottom_rate), dtype),
        exit=_conv(rng, same(3, 3, c, c), dtype),
    )


def init_mif(rng, channels, dtype=T.DEFAULT_DTYPE) -> MifParams:
    c = channels
    return MifParams(
        low_cbr=_cbr(rng, c, c, dtype),
        high_cbr=_cbr(rng, c, c, dtype),
        low_fuse=_conv(rng, ConvSpec.same(1, 1, 2, 1), dtype),
        high_fuse=_conv(rng, ConvSpec.same(1, 1, 2, 1), dtype),
        high_out_cbr=_cbr(rng, c, c, dtype),
        out_cbr=_cbr(rng, c, c, dtype),
    )


def init_backbone(rng, cfg: NetConfig, dtype=T.DEFAULT_DTYPE) -> BackboneStub:
    chans = (cfg.in_channels,) + tuple(cfg.backbone_channels)
    # Stage 1 patchifies by 4; later stages halve resolution with 3x3/2 convs.
    specs = [ConvSpec(4, 4, chans[0], chans[1], stride=4)]
    for i in range(1, 4):
        specs.append(ConvSpec(3, 3, chans[i], chans[i + 1], stride=2, padding=(1, 1)))
    return BackboneStub(tuple(_conv(rng, s, dtype) for s in specs))


def build_net(seed: int = 42, config: NetConfig = NetConfig(), dtype=T.DEFAULT_DTYPE) -> McifNet:
    rng = np.random.default_rng(seed)
    c = config.channels
    backbone = init_backbone(rng, config, dtype)
    dmc = tuple(init_dmc(rng, cin, c, config, dtype) for cin in config.backbone_channels)
    mif = tuple(init_mif(rng, c, dtype) for _ in range(3))
    heads = tuple(_conv(rng, ConvSpec(1, 1, c, 1), dtype) for _ in range(4))
    return McifNet(config, backbone, dmc, mif, heads)


# -- forward pieces ------------------------------------------------------------


def conv(ops, x, layer: Conv):
    return ops.conv2d(x, layer.weight, layer.bias, layer.spec)


def cbr(ops, x, block: CBR, eps=1e-5, training=False):
    y = conv(ops, x, block.conv)
    y = ops.batch_norm(y, block.gamma, block.beta, block.running_mean, block.running_var, eps, training)
    return ops.relu(y)


def _shape(x):
    return getattr(x, "value", x).shape


def dmc_forward(x, params: DmcParams, ops=T):
    """Dual-branch mixture convolution; output has ``params.out_channels`` channels."""
    if _shape(x)[1] != params.in_channels:
        raise ShapeError(
            f"DMC expects {params.in_channels} input channels, got {_shape(x)[1]}", "c"
        )
    base = conv(ops, x, params.entry)
    top = conv(ops, conv(ops, conv(ops, base, params.top_reduce), params.top_row), params.top_col)
    bottom = conv(
        ops, conv(ops, conv(ops, base, params.bottom_reduce), params.bottom_row), params.bottom_col
    )
    mixed = ops.add(top, bottom)
    context = ops.add(conv(ops, mixed, params.top_dilated), conv(ops, mixed, params.bottom_dilated))
    return ops.relu(conv(ops, context, params.exit))


@dataclass
class MifTrace:
    """Intermediate maps of one MIF evaluation (pre-softmax attention etc.)."""

    low_max: Any = None
    low_mean: Any = None
    high_max: Any = None
    high_mean: Any = None
    m_low: Any = None
    m_high: Any = None
    x_low_hat: Any = None
    x_high_hat: Any = None
    extras: dict = field(default_factory=dict)


def mif_forward(x_low, x_high, params: MifParams, ops=T, eps=1e-5, training=False, trace: MifTrace | None = None):
    """Multi-level interactive fusion of adjacent pyramid levels.

    Output lives at ``x_low``'s resolution with the shared channel count.
    Cross-branch enhancement always uses the opposite branch's maps from
    before any enhancement.
    """
    ls, hs = _shape(x_low), _shape(x_high)
    if ls[1] != hs[1]:
        raise ShapeError(f"MIF channel mismatch: low {ls[1]} vs high {hs[1]}", "c")
    if ls[0] != hs[0]:
        raise ShapeError(f"MIF batch mismatch: low {ls[0]} vs high {hs[0]}", "n")
    if ls[2] != 2 * hs[2] or ls[3] != 2 * hs[3]:
        raise ShapeError(
            f"MIF expects the low level at twice the high level's size, got {ls[2:]} vs {hs[2:]}", "h"
        )
    lh, lw, hh, hw = ls[2], ls[3], hs[2], hs[3]

    low = cbr(ops, x_low, params.low_cbr, eps, training)
    high = cbr(ops, x_high, params.high_cbr, eps, training)
    l_max = ops.sigmoid(ops.channel_max(low))
    l_mean = ops.sigmoid(ops.channel_mean(low))
    h_max = ops.sigmoid(ops.channel_max(high))
    h_mean = ops.sigmoid(ops.channel_mean(high))

    l_max_e = ops.hadamard(l_max, ops.resize_to(h_mean, lh, lw))
    l_mean_e = ops.hadamard(l_mean, ops.resize_to(h_max, lh, lw))
    h_max_e = ops.hadamard(h_max, ops.resize_to(l_mean, hh, hw))
    h_mean_e = ops.hadamard(h_mean, ops.resize_to(l_max, hh, hw))

    m_low = conv(ops, ops.concat_channels(l_mean_e, l_max_e), params.low_fuse)
    m_high = conv(ops, ops.concat_channels(h_max_e, h_mean_e), params.high_fuse)

    x_low_hat = ops.add(ops.mul_map(ops.spatial_softmax(m_low), x_low), x_low)
    x_high_hat = ops.add(ops.mul_map(ops.spatial_softmax(m_high), x_high), x_high)

    high_feat = ops.resize_to(cbr(ops, x_high_hat, params.high_out_cbr, eps, training), lh, lw)
    out = cbr(ops, ops.hadamard(x_low_hat, high_feat), params.out_cbr, eps, training)

    if trace is not None:
        trace.low_max, trace.low_mean = l_max_e, l_mean_e
        trace.high_max, trace.high_mean = h_max_e, h_mean_e
        trace.m_low, trace.m_high = m_low, m_high
        trace.x_low_hat, trace.x_high_hat = x_low_hat, x_high_hat
    return out


def backbone_forward(image, backbone: BackboneStub, ops=T):
    feats = []
    x = image
    for stage in backbone.stages:
        x = ops.relu(conv(ops, x, stage))
        feats.append(x)
    return feats


def adjacent_product(fine, coarse, ops=T):
    """``fine * upsample(coarse)``: coarse level resized to the fine level first."""
    h, w = _shape(fine)[2:]
    return ops.hadamard(fine, ops.resize_to(coarse, h, w))


def network_forward(image, net: McifNet, ops=T):
    """Run the full network; returns ``(FeaturePyramid, PredictionSet)`` of logits."""
    shape = _shape(image)
    if len(shape) != 4:
        raise ShapeError(f"image must be NCHW, got {shape}")
    h, w = shape[2], shape[3]
    if h % 32 or w % 32:
        raise ShapeError(f"input size {h}x{w} must be divisible by 32", "h" if h % 32 else "w")
    cfg = net.config
    bn = dict(eps=cfg.bn_eps, training=cfg.bn_training)

    x = backbone_forward(image, net.backbone, ops)
    xd = [dmc_forward(xi, p, ops) for xi, p in zip(x, net.dmc)]
    xm = [adjacent_product(xd[j], xd[j + 1], ops) for j in range(3)]
    xa = [None, None, None, xd[3]]
    for j in (2, 1, 0):
        xa[j] = mif_forward(xm[j], xa[j + 1], net.mif[j], ops, **bn)
    preds = [ops.resize_to(conv(ops, xa[i], head), h, w) for i, head in enumerate(net.heads)]
    return FeaturePyramid(x, xd, xm, xa), PredictionSet(preds)


# -- receptive field -------------------------------------------------------


def effective_receptive_field(chain) -> tuple[int, int]:
    """Receptive field of a stride-1 conv chain: r += (k - 1) * dilation per axis."""
    chain = list(chain)
    if not chain:
        raise ValueError("empty conv chain")
    rf_h = rf_w = 1
    for spec in chain:
        if spec.stride != 1:
            raise ValueError("receptive field recurrence assumes stride 1")
        rf_h += (spec.kernel_h - 1) * spec.dilation
        rf_w += (spec.kernel_w - 1) * spec.dilation
    return rf_h, rf_w


def dmc_paths(params: DmcParams):
    """Conv chains through the top and bottom branches of a DMC module."""
    top = [params.entry, params.top_reduce, params.top_row, params.top_col, params.top_dilated, params.exit]
    bottom = [
        params.entry,
        params.bottom_reduce,
        params.bottom_row,
        params.bottom_col,
        params.bottom_dilated,
        params.exit,
    ]
    return [c.spec for c in top], [c.spec for c in bottom]
