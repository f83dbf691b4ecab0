"""Reverse-mode differentiation over the tensor primitives.

A :class:`Tape` records every op applied to its :class:`Var` objects. The op
methods mirror the names in :mod:`codnet.tensor`, so model code written
against an ``ops`` namespace runs unchanged on plain arrays (pass the
``tensor`` module) or on a tape (pass the tape).

Inputs that are plain arrays are treated as constants; no gradient is
produced for them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T


class GradientError(RuntimeError):
    pass


class Var:
    __slots__ = ("tape", "id", "value", "name")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, name: str | None = None):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape}, name={self.name!r})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple  # node ids, None for constants
    backward: Callable | None = field(repr=False, default=None)
    saved: dict = field(repr=False, default_factory=dict)


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


class Tape:
    """One tape per thread; not safe to share."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._grads: dict[int, np.ndarray] | None = None

    # -- recording -----------------------------------------------------

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.array(value, copy=True)
        self.nodes.append(TapeNode("leaf", ()))
        return Var(self, len(self.nodes) - 1, value, name)

    def _ids(self, inputs):
        ids = []
        for x in inputs:
            if isinstance(x, Var):
                if x.tape is not self:
                    raise GradientError("input variable belongs to a different tape")
                ids.append(x.id)
            else:
                ids.append(None)
        return tuple(ids)

    def _record(self, op, inputs, value, backward, **saved) -> Var:
        if self._grads is not None:
            raise GradientError("tape already consumed by backward(); record a new tape")
        self.nodes.append(TapeNode(op, self._ids(inputs), backward, saved))
        return Var(self, len(self.nodes) - 1, value)

    def branch_signature(self) -> bytes:
        """Every ReLU mask and channel-max argmax recorded so far, as bytes.

        Two evaluations with equal signatures lie in the same smooth piece of a
        piecewise-smooth function.
        """
        parts = [n.saved["branch"].tobytes() for n in self.nodes if "branch" in n.saved]
        return b"".join(parts)

    # -- backward ------------------------------------------------------

    def backward(self, out: Var) -> dict[int, np.ndarray]:
        if not isinstance(out, Var) or out.tape is not self:
            raise GradientError("output is not attached to this tape")
        if out.value.size != 1:
            raise GradientError(f"backward needs a scalar output, got shape {out.value.shape}")
        if self._grads is not None:
            raise GradientError("backward() already ran on this tape")
        grads = {out.id: np.ones_like(out.value)}
        for node_id in range(out.id, -1, -1):
            g = grads.get(node_id)
            node = self.nodes[node_id]
            if g is None or node.backward is None:
                continue
            for src, gi in zip(node.inputs, node.backward(g)):
                if src is None or gi is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        self._grads = grads
        return grads

    def grad(self, var: Var) -> np.ndarray:
        if self._grads is None:
            raise GradientError("call backward() first")
        g = self._grads.get(var.id)
        return np.zeros_like(var.value) if g is None else g

    # -- ops -------------------------------------------------------------

    def conv2d(self, x, weights, bias, spec: T.ConvSpec) -> Var:
        xv, wv = _value(x), _value(weights)
        bv = None if bias is None else _value(bias)
        out = T.conv2d(xv, wv, bv, spec)

        def backward(g):
            gx, gw, gb = T.conv2d_backward(g, xv, wv, spec)
            return gx, gw, gb

        return self._record("conv2d", (x, weights, bias), out, backward)

    def relu(self, x) -> Var:
        xv = _value(x)
        # Subgradient 0 at exactly 0.
        mask = xv > 0
        return self._record("relu", (x,), T.relu(xv), lambda g: (g * mask,), branch=mask)

    def sigmoid(self, x) -> Var:
        s = T.sigmoid(_value(x))
        return self._record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))

    def spatial_softmax(self, m) -> Var:
        s = T.spatial_softmax(_value(m))

        def backward(g):
            dot = np.sum(g * s, axis=(1, 2, 3), keepdims=True)
            return (s * (g - dot),)

        return self._record("spatial_softmax", (m,), s, backward)

    def channel_max(self, x) -> Var:
        xv = _value(x)
        idx = np.argmax(xv, axis=1)[:, None]

        def backward(g):
            gx = np.zeros_like(xv)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return self._record("channel_max", (x,), T.channel_max(xv), backward, branch=idx)

    def channel_mean(self, x) -> Var:
        xv = _value(x)
        c = xv.shape[1]
        return self._record(
            "channel_mean",
            (x,),
            T.channel_mean(xv),
            lambda g: (np.broadcast_to(g / c, xv.shape).copy(),),
        )

    def hadamard(self, a, b) -> Var:
        av, bv = _value(a), _value(b)
        return self._record("hadamard", (a, b), T.hadamard(av, bv), lambda g: (g * bv, g * av))

    def add(self, a, b) -> Var:
        return self._record("add", (a, b), T.add(_value(a), _value(b)), lambda g: (g, g))

    def mul_map(self, m, x) -> Var:
        mv, xv = _value(m), _value(x)
        return self._record(
            "mul_map",
            (m, x),
            T.mul_map(mv, xv),
            lambda g: (np.sum(g * xv, axis=1, keepdims=True), g * mv),
        )

    def concat_channels(self, a, b) -> Var:
        av, bv = _value(a), _value(b)
        ca = av.shape[1]
        return self._record(
            "concat_channels",
            (a, b),
            T.concat_channels(av, bv),
            lambda g: (g[:, :ca], g[:, ca:]),
        )

    def bilinear_resize(self, x, spec: T.ResizeSpec) -> Var:
        xv = _value(x)
        h, w = xv.shape[2], xv.shape[3]
        return self._record(
            "bilinear_resize",
            (x,),
            T.bilinear_resize(xv, spec),
            lambda g: (T.bilinear_resize_backward(g, h, w),),
        )

    def resize_to(self, x, h: int, w: int) -> Var:
        return self.bilinear_resize(x, T.ResizeSpec(h, w))

    def batch_norm(self, x, gamma, beta, mean, var, eps=1e-5, training=False) -> Var:
        xv, gv, bv = _value(x), _value(gamma), _value(beta)
        axes = (0, 2, 3)
        if training:
            mu = xv.mean(axis=axes)
            sig2 = xv.var(axis=axes)
        else:
            mu, sig2 = _value(mean), _value(var)
        inv = 1.0 / np.sqrt(sig2 + eps)
        xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
        out = (xhat * gv[None, :, None, None] + bv[None, :, None, None]).astype(xv.dtype, copy=False)

        def backward(g):
            ggamma = np.sum(g * xhat, axis=axes)
            gbeta = np.sum(g, axis=axes)
            gxhat = g * gv[None, :, None, None]
            if training:
                m = xv.shape[0] * xv.shape[2] * xv.shape[3]
                gx = (
                    inv[None, :, None, None]
                    / m
                    * (
                        m * gxhat
                        - np.sum(gxhat, axis=axes)[None, :, None, None]
                        - xhat * np.sum(gxhat * xhat, axis=axes)[None, :, None, None]
                    )
                )
            else:
                gx = gxhat * inv[None, :, None, None]
            # Running statistics are buffers, never differentiated.
            return gx, ggamma, gbeta, None, None

        return self._record("batch_norm", (x, gamma, beta, mean, var), out, backward)

    def scale(self, x, c: float) -> Var:
        return self._record("scale", (x,), _value(x) * c, lambda g: (g * c,))

    def sum(self, x) -> Var:
        xv = _value(x)
        return self._record(
            "sum", (x,), np.asarray(xv.sum(), dtype=xv.dtype), lambda g: (np.full_like(xv, g),)
        )

    def dot(self, x, weights) -> Var:
        """Scalar ``sum(x * weights)`` with ``weights`` held constant."""
        xv = _value(x)
        wv = np.asarray(weights, dtype=xv.dtype)
        return self._record("dot", (x,), np.asarray(np.sum(xv * wv)), lambda g: (g * wv,))

    def add_scalars(self, *terms) -> Var:
        vals = [_value(t) for t in terms]
        total = np.asarray(sum(float(v) for v in vals), dtype=vals[0].dtype)
        return self._record("add_scalars", terms, total, lambda g: tuple(g for _ in terms))

    def weighted_bce(self, p, g_mask, eps: float = L.DEFAULT_EPS, normalized: bool = False, weights=None) -> Var:
        """Balance weights are constants: computed from ``p`` here unless given."""
        pv = _value(p)
        value = L.weighted_bce(pv, g_mask, eps=eps, normalized=normalized, weights=weights)
        grad = L.weighted_bce_grad(pv, g_mask, eps=eps, normalized=normalized, weights=weights)
        return self._record(
            "weighted_bce", (p,), np.asarray(value, dtype=pv.dtype), lambda g: (g * grad,)
        )

    def iou_loss(self, p, g_mask) -> Var:
        pv = _value(p)
        value = L.iou_loss(pv, g_mask)
        grad = L.iou_loss_grad(pv, g_mask)
        return self._record("iou_loss", (p,), np.asarray(value, dtype=pv.dtype), lambda g: (g * grad,))


# --------------------------------------------------------------------------
# Finite-difference checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    op: str
    max_abs_err: float
    max_rel_err: float
    h: float
    precision: str
    tolerance: float
    checked: int
    skipped_kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self):
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"{flag} {self.op:<28} rel={self.max_rel_err:.3e} abs={self.max_abs_err:.3e} "
            f"n={self.checked} h={self.h:g} {self.precision}"
            + (f" kinks-skipped={self.skipped_kinks}" if self.skipped_kinks else "")
        )


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger gradient's max-norm."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    err = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale == 0.0:
        return 0.0 if err == 0.0 else float("inf")
    return float(err / scale)


def tape_gradient(fn, inputs: dict[str, np.ndarray]):
    tape = Tape()
    vars_ = {k: tape.leaf(v, k) for k, v in inputs.items()}
    out = fn(tape, vars_)
    tape.backward(out)
    return float(out.value), {k: tape.grad(v) for k, v in vars_.items()}


def evaluate(fn, inputs: dict[str, np.ndarray], signature: bool = False):
    tape = Tape()
    vars_ = {k: tape.leaf(v, k) for k, v in inputs.items()}
    value = float(fn(tape, vars_).value)
    if not np.isfinite(value):
        raise FloatingPointError("function value is not finite")
    return (value, tape.branch_signature()) if signature else value


def finite_diff_check(
    fn,
    x,
    h: float = 1e-3,
    tol: float = 1e-4,
    name: str = "fn",
    wrt=None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients against central differences.

    ``fn(tape, vars)`` must return a scalar :class:`Var`; ``x`` is either one
    array or a dict of named arrays. ``wrt`` restricts which inputs are
    checked; ``max_coords`` samples at most that many coordinates per input.
    With ``skip_kinks``, coordinates whose +/-h probes change any ReLU mask
    or channel-max choice are excluded (central differences are meaningless
    across a kink) and counted in the report.
    """
    inputs = {"x": np.asarray(x)} if not isinstance(x, dict) else dict(x)
    single = not isinstance(x, dict)
    call = (lambda tape, v: fn(tape, v["x"])) if single else fn
    _, grads = tape_gradient(call, inputs)
    base_sig = evaluate(call, inputs, signature=True)[1] if skip_kinks else None
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = list(inputs) if wrt is None else list(wrt)

    analytic, numeric = [], []
    skipped = 0
    for key in keys:
        base = inputs[key]
        flat_idx = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            flat_idx = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        for i in flat_idx:
            idx = np.unravel_index(i, base.shape)
            plus = dict(inputs)
            minus = dict(inputs)
            plus[key] = base.copy()
            minus[key] = base.copy()
            plus[key][idx] += h
            minus[key][idx] -= h
            if skip_kinks:
                f_plus, sig_plus = evaluate(call, plus, signature=True)
                f_minus, sig_minus = evaluate(call, minus, signature=True)
                if sig_plus != base_sig or sig_minus != base_sig:
                    skipped += 1
                    continue
            else:
                f_plus, f_minus = evaluate(call, plus), evaluate(call, minus)
            numeric.append((f_plus - f_minus) / (2 * h))
            analytic.append(float(grads[key][idx]))
    analytic = np.array(analytic)
    numeric = np.array(numeric)
    dtype = next(iter(inputs.values())).dtype
    return GradCheckReport(
        op=name,
        max_abs_err=float(np.max(np.abs(analytic - numeric), initial=0.0)),
        max_rel_err=relative_error(analytic, numeric),
        h=h,
        precision="f64" if dtype == np.float64 else "f32",
        tolerance=tol,
        checked=len(analytic),
        skipped_kinks=skipped,
    )


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def sgd_step(params, grads, buffers, lr=0.005, weight_decay=0.0005, momentum=0.95):
    """One SGD-with-momentum update.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    ``buffers`` maps names to momentum arrays and is updated in place; missing
    entries start at zero. Returns the new parameter dict.
    """
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise T.ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(p)}")
        v = buffers.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + g + weight_decay * p
        buffers[name] = v.astype(p.dtype, copy=False)
        updated[name] = (p - lr * v).astype(p.dtype, copy=False)
    return updated


@dataclass
class SGD:
    lr: float = 0.005
    weight_decay: float = 0.0005
    momentum: float = 0.95
    buffers: dict = field(default_factory=dict)

    def step(self, params, grads):
        return sgd_step(params, grads, self.buffers, self.lr, self.weight_decay, self.momentum)
