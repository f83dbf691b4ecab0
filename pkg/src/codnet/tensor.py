"""Rank-4 NCHW tensor primitives.

Tensors are plain ``numpy.ndarray`` objects with ``ndim == 4`` and every
dimension >= 1. Every function here is pure: it never mutates its inputs and
returns a fresh array. Precision follows the input dtype (float32 by default,
float64 for gradient checking).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

# Finite-value assertion after every op; enable with CODNET_DEBUG=1.
CHECK_FINITE = os.environ.get("CODNET_DEBUG", "") not in ("", "0")

_AXES = ("n", "c", "h", "w")


class ShapeError(ValueError):
    """Raised when tensor dimensions do not satisfy an operation's contract."""

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


def _threads_from_env() -> int:
    value = os.environ.get("CODNET_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


_num_threads = _threads_from_env()


def set_num_threads(n: int) -> None:
    global _num_threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = int(n)


def get_num_threads() -> int:
    return _num_threads


def as_tensor(x, dtype=None) -> np.ndarray:
    """Validate ``x`` as an NCHW tensor and return it as a contiguous array."""
    arr = np.ascontiguousarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(DEFAULT_DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"expected a rank-4 NCHW tensor, got shape {arr.shape}")
    for axis, size in zip(_AXES, arr.shape):
        if size < 1:
            raise ShapeError(f"axis {axis} has size {size}; all dimensions must be >= 1", axis)
    return arr


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def _same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for axis, sa, sb in zip(_AXES, a.shape, b.shape):
        if sa != sb:
            raise ShapeError(f"{op}: axis {axis} mismatch ({sa} vs {sb})", axis)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    dilation: int = 1
    stride: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "in_channels", "out_channels", "dilation", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if min(self.padding) < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def same(cls, kernel_h, kernel_w, in_channels, out_channels, dilation=1):
        """Stride-1 spec whose zero padding preserves spatial size."""
        return cls(
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            dilation=dilation,
            stride=1,
            padding=(same_padding(kernel_h, dilation), same_padding(kernel_w, dilation)),
        )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = _out_extent(h, self.kernel_h, self.padding[0], self.dilation, self.stride)
        ow = _out_extent(w, self.kernel_w, self.padding[1], self.dilation, self.stride)
        if oh < 1:
            raise ShapeError(f"conv output height {oh} < 1 for input height {h}", "h")
        if ow < 1:
            raise ShapeError(f"conv output width {ow} < 1 for input width {w}", "w")
        return oh, ow


def same_padding(k: int, dilation: int = 1) -> int:
    span = dilation * (k - 1)
    if span % 2:
        raise ValueError(f"no symmetric 'same' padding for kernel {k} with dilation {dilation}")
    return span // 2


def _out_extent(size, k, pad, dilation, stride):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _check_conv_args(x, weights, bias, spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d: input axis c has {x.shape[1]} channels, spec expects {spec.in_channels}", "c"
        )
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weights shape {weights.shape} != {spec.weight_shape}", "weights")
    if bias is not None and np.shape(bias) != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shape {np.shape(bias)} != ({spec.out_channels},)", "bias")
    return spec.output_size(x.shape[2], x.shape[3])


def _pad(x, spec: ConvSpec):
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap(xp, ci, ky, kx, spec: ConvSpec, oh, ow):
    """Input window hit by kernel tap (ky, kx) for every output position."""
    y0 = ky * spec.dilation
    x0 = kx * spec.dilation
    s = spec.stride
    return xp[:, ci, y0 : y0 + s * (oh - 1) + 1 : s, x0 : x0 + s * (ow - 1) + 1 : s]


def conv2d(x, weights, bias, spec: ConvSpec, threads: int | None = None) -> np.ndarray:
    """Zero-padded cross-correlation with a fixed summation order.

    Every output element accumulates ``bias + sum_ci sum_ky sum_kx w * x`` in
    exactly that loop order, so results are bit-reproducible and do not depend
    on ``threads`` (work is split over output-channel blocks only).
    """
    x = np.asarray(x)
    weights = np.asarray(weights, dtype=x.dtype)
    oh, ow = _check_conv_args(x, weights, bias, spec)
    xp = _pad(x, spec)
    n = x.shape[0]
    out = np.empty((n, spec.out_channels, oh, ow), dtype=x.dtype)
    b = np.zeros(spec.out_channels, x.dtype) if bias is None else np.asarray(bias, x.dtype)

    def run(lo, hi):
        acc = np.empty((n, hi - lo, oh, ow), dtype=x.dtype)
        acc[...] = b[lo:hi, None, None]
        w = weights[lo:hi]
        for ci in range(spec.in_channels):
            for ky in range(spec.kernel_h):
                for kx in range(spec.kernel_w):
                    acc += w[None, :, ci, ky, kx, None, None] * _tap(xp, ci, ky, kx, spec, oh, ow)[:, None]
        out[:, lo:hi] = acc

    threads = get_num_threads() if threads is None else threads
    blocks = min(threads, spec.out_channels)
    if blocks <= 1:
        run(0, spec.out_channels)
    else:
        edges = np.linspace(0, spec.out_channels, blocks + 1).astype(int)
        with ThreadPoolExecutor(blocks) as pool:
            list(pool.map(run, edges[:-1], edges[1:]))
    return _finite(out, "conv2d")


def conv2d_im2col(x, weights, bias, spec: ConvSpec) -> np.ndarray:
    """Fast path: unfold the input into columns and use one matrix product."""
    x = np.asarray(x)
    weights = np.asarray(weights, dtype=x.dtype)
    oh, ow = _check_conv_args(x, weights, bias, spec)
    xp = _pad(x, spec)
    n = x.shape[0]
    cols = np.empty((n, spec.in_channels, spec.kernel_h, spec.kernel_w, oh, ow), dtype=x.dtype)
    for ky in range(spec.kernel_h):
        for kx in range(spec.kernel_w):
            y0, x0, s = ky * spec.dilation, kx * spec.dilation, spec.stride
            cols[:, :, ky, kx] = xp[:, :, y0 : y0 + s * (oh - 1) + 1 : s, x0 : x0 + s * (ow - 1) + 1 : s]
    cols = cols.reshape(n, -1, oh * ow)
    out = np.matmul(weights.reshape(spec.out_channels, -1), cols).reshape(n, spec.out_channels, oh, ow)
    if bias is not None:
        out += np.asarray(bias, x.dtype)[None, :, None, None]
    return _finite(out, "conv2d_im2col")


def conv2d_oracle(x, weights, bias, spec: ConvSpec) -> np.ndarray:
    """Reference convolution written as the plainest possible nested loop."""
    x = np.asarray(x)
    weights = np.asarray(weights, dtype=x.dtype)
    oh, ow = _check_conv_args(x, weights, bias, spec)
    n, cin, h, w = x.shape
    ph, pw = spec.padding
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=np.float64)
    for b in range(n):
        for co in range(spec.out_channels):
            for oy in range(oh):
                for ox in range(ow):
                    total = 0.0 if bias is None else float(bias[co])
                    for ci in range(cin):
                        for ky in range(spec.kernel_h):
                            iy = oy * spec.stride + ky * spec.dilation - ph
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(spec.kernel_w):
                                ix = ox * spec.stride + kx * spec.dilation - pw
                                if 0 <= ix < w:
                                    total += float(weights[co, ci, ky, kx]) * float(x[b, ci, iy, ix])
                    out[b, co, oy, ox] = total
    return out.astype(x.dtype)


def conv2d_backward(grad_out, x, weights, spec: ConvSpec):
    """Gradients of ``conv2d`` w.r.t. input, weights and bias."""
    grad_out = np.asarray(grad_out)
    n, _, oh, ow = grad_out.shape
    xp = _pad(np.asarray(x), spec)
    gxp = np.zeros_like(xp)
    gw = np.zeros(spec.weight_shape, dtype=grad_out.dtype)
    s, d = spec.stride, spec.dilation
    for ky in range(spec.kernel_h):
        for kx in range(spec.kernel_w):
            ys = slice(ky * d, ky * d + s * (oh - 1) + 1, s)
            xs = slice(kx * d, kx * d + s * (ow - 1) + 1, s)
            window = xp[:, :, ys, xs]
            gw[:, :, ky, kx] = np.einsum("nohw,nihw->oi", grad_out, window)
            gxp[:, :, ys, xs] += np.einsum("nohw,oi->nihw", grad_out, weights[:, :, ky, kx])
    ph, pw = spec.padding
    gx = gxp[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    gb = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(gx), gw, gb


# --------------------------------------------------------------------------
# Elementwise ops and reductions
# --------------------------------------------------------------------------


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x)
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e))
    return _finite(out.astype(x.dtype, copy=False), "sigmoid")


def spatial_softmax(m) -> np.ndarray:
    """Softmax over all h*w positions of a single-channel map, per sample."""
    m = np.asarray(m)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"spatial_softmax expects shape (n, 1, h, w), got {m.shape}", "c")
    flat = m.reshape(m.shape[0], -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)
    return _finite(out.reshape(m.shape), "spatial_softmax")


def channel_max(x) -> np.ndarray:
    return np.max(x, axis=1, keepdims=True)


def channel_mean(x) -> np.ndarray:
    return np.mean(x, axis=1, keepdims=True)


def hadamard(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b, "hadamard")
    return _finite(a * b, "hadamard")


def add(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    _same_shape(a, b, "add")
    return _finite(a + b, "add")


def mul_map(m, x) -> np.ndarray:
    """Multiply every channel of ``x`` by the single-channel map ``m``."""
    m, x = np.asarray(m), np.asarray(x)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"mul_map expects a (n, 1, h, w) map, got {m.shape}", "c")
    _same_shape(m, x[:, :1], "mul_map")
    return m * x


def concat_channels(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    for axis in (0, 2, 3):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat_channels: axis {_AXES[axis]} mismatch ({a.shape[axis]} vs {b.shape[axis]})",
                _AXES[axis],
            )
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ShapeError("concat_channels: both inputs need at least one channel", "c")
    return np.concatenate([a, b], axis=1)


def batch_norm(x, gamma, beta, mean, var, eps=1e-5, training=False) -> np.ndarray:
    """Per-channel normalization; ``training`` uses the batch's own moments."""
    x = np.asarray(x)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    scale = np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)
    shift = np.asarray(beta) - np.asarray(mean) * scale
    return (x * scale[None, :, None, None] + shift[None, :, None, None]).astype(x.dtype, copy=False)


# --------------------------------------------------------------------------
# Resize
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ResizeSpec:
    target_h: int
    target_w: int
    mode: str = "bilinear"

    def __post_init__(self):
        if self.target_h < 1 or self.target_w < 1:
            raise ValueError("resize target dimensions must be >= 1")
        if self.mode != "bilinear":
            raise ValueError(f"unsupported resize mode {self.mode!r}")


def _sample_points(src: int, dst: int):
    """Half-pixel source coordinates: s = (d + 0.5) * src/dst - 0.5, clamped."""
    s = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    s = np.clip(s, 0, src - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, src - 1)
    return i0, i1, s - i0


def resize_matrix(src: int, dst: int) -> np.ndarray:
    """Dense (dst, src) interpolation matrix of the 1-D bilinear sampler."""
    i0, i1, frac = _sample_points(src, dst)
    mat = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(mat, (rows, i0), 1 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def bilinear_resize(x, spec: ResizeSpec) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (spec.target_h, spec.target_w):
        return x.copy()
    y0, y1, fy = _sample_points(h, spec.target_h)
    x0, x1, fx = _sample_points(w, spec.target_w)
    fy = fy.astype(x.dtype)[:, None]
    fx = fx.astype(x.dtype)
    rows = x[:, :, y0, :] * (1 - fy) + x[:, :, y1, :] * fy
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    return _finite(out, "bilinear_resize")


def resize_to(x, h: int, w: int) -> np.ndarray:
    return bilinear_resize(x, ResizeSpec(h, w))


def bilinear_resize_backward(grad_out, src_h: int, src_w: int) -> np.ndarray:
    grad_out = np.asarray(grad_out)
    dst_h, dst_w = grad_out.shape[2], grad_out.shape[3]
    if (dst_h, dst_w) == (src_h, src_w):
        return grad_out.copy()
    ry = resize_matrix(src_h, dst_h).astype(grad_out.dtype)
    rx = resize_matrix(src_w, dst_w).astype(grad_out.dtype)
    return np.einsum("ip,ncij,jq->ncpq", ry, grad_out, rx)


def kaiming_uniform(rng: np.random.Generator, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
