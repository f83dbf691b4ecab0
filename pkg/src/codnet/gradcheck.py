"""Finite-difference suite covering every differentiable op and the full loss."""
from __future__ import annotations

import numpy as np

from . import losses as L
from . import network as N
from .autograd import finite_diff_check
from .tensor import ConvSpec, ResizeSpec

H = 1e-3
TOL = 1e-4


def _uniform(rng, shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, shape, margin=0.05):
    x = _uniform(rng, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _separated_channels(rng, shape, gap=0.05):
    # Distinct per-pixel channel values so the max never switches under +/- h.
    n, c, h, w = shape
    base = np.stack([rng.permutation(c) for _ in range(n * h * w)]).reshape(n, h, w, c)
    x = -2 + base * (4.0 / max(c - 1, 1)) * (1 - gap) + rng.uniform(0, gap, size=base.shape)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _projected(op):
    """Scalar test function ``sum(op(...) * r)`` with a fixed random projection."""

    def make(rng, out_shape):
        r = rng.uniform(-1, 1, size=out_shape)
        return lambda tape, v: tape.dot(op(tape, v), r)

    return make


def op_cases(rng):
    """(name, inputs, fn) triples for single-op checks."""
    cases = []

    def add(name, inputs, op, out_shape):
        cases.append((name, inputs, _projected(op)(rng, out_shape)))

    conv_specs = [
        ("conv2d 3x3 same", ConvSpec.same(3, 3, 2, 3), (2, 2, 5, 5)),
        ("conv2d 1x5 asym", ConvSpec.same(1, 5, 2, 2), (1, 2, 4, 6)),
        ("conv2d 7x1 asym", ConvSpec.same(7, 1, 2, 2), (1, 2, 8, 3)),
        ("conv2d 3x3 dil5", ConvSpec.same(3, 3, 2, 2, dilation=5), (1, 2, 7, 7)),
        ("conv2d 3x3 dil7", ConvSpec.same(3, 3, 1, 2, dilation=7), (1, 1, 9, 9)),
        ("conv2d 4x4 stride4", ConvSpec(4, 4, 3, 2, stride=4), (1, 3, 8, 8)),
        ("conv2d 3x3 stride2", ConvSpec(3, 3, 2, 2, stride=2, padding=(1, 1)), (1, 2, 6, 6)),
    ]
    for name, spec, xshape in conv_specs:
        inputs = {
            "x": _uniform(rng, xshape),
            "w": _uniform(rng, spec.weight_shape),
            "b": _uniform(rng, (spec.out_channels,)),
        }
        oh, ow = spec.output_size(xshape[2], xshape[3])
        add(name, inputs, lambda t, v, s=spec: t.conv2d(v["x"], v["w"], v["b"], s),
            (xshape[0], spec.out_channels, oh, ow))

    shape = (2, 3, 4, 5)
    add("relu", {"x": _away_from_zero(rng, shape)}, lambda t, v: t.relu(v["x"]), shape)
    add("sigmoid", {"x": _uniform(rng, shape)}, lambda t, v: t.sigmoid(v["x"]), shape)
    add("spatial_softmax", {"x": _uniform(rng, (2, 1, 4, 4))},
        lambda t, v: t.spatial_softmax(v["x"]), (2, 1, 4, 4))
    add("channel_max", {"x": _separated_channels(rng, shape)},
        lambda t, v: t.channel_max(v["x"]), (2, 1, 4, 5))
    add("channel_mean", {"x": _uniform(rng, shape)}, lambda t, v: t.channel_mean(v["x"]), (2, 1, 4, 5))
    add("hadamard", {"a": _uniform(rng, shape), "b": _uniform(rng, shape)},
        lambda t, v: t.hadamard(v["a"], v["b"]), shape)
    add("add", {"a": _uniform(rng, shape), "b": _uniform(rng, shape)},
        lambda t, v: t.add(v["a"], v["b"]), shape)
    add("mul_map", {"m": _uniform(rng, (2, 1, 4, 5)), "x": _uniform(rng, shape)},
        lambda t, v: t.mul_map(v["m"], v["x"]), shape)
    add("concat_channels", {"a": _uniform(rng, (1, 2, 3, 3)), "b": _uniform(rng, (1, 1, 3, 3))},
        lambda t, v: t.concat_channels(v["a"], v["b"]), (1, 3, 3, 3))
    add("bilinear_resize up", {"x": _uniform(rng, (1, 2, 3, 4))},
        lambda t, v: t.bilinear_resize(v["x"], ResizeSpec(7, 8)), (1, 2, 7, 8))
    add("bilinear_resize down", {"x": _uniform(rng, (1, 2, 8, 6))},
        lambda t, v: t.bilinear_resize(v["x"], ResizeSpec(4, 3)), (1, 2, 4, 3))
    c = 3
    bn_inputs = {
        "x": _uniform(rng, (2, c, 3, 3)),
        "gamma": _uniform(rng, (c,), 0.5, 1.5),
        "beta": _uniform(rng, (c,)),
    }
    mean = _uniform(rng, (c,), -0.5, 0.5)
    var = _uniform(rng, (c,), 0.5, 2.0)
    add("batch_norm inference", bn_inputs,
        lambda t, v: t.batch_norm(v["x"], v["gamma"], v["beta"], mean, var), (2, c, 3, 3))
    add("batch_norm batch-stats", dict(bn_inputs),
        lambda t, v: t.batch_norm(v["x"], v["gamma"], v["beta"], mean, var, training=True), (2, c, 3, 3))
    return cases


def loss_cases(rng, pairs: int = 1):
    """Weighted BCE and IoU loss checks on random (p, g) pairs."""
    cases = []
    for k in range(pairs):
        # Probabilities as the network produces them: sigmoid of logits in [-2, 2].
        p = 1.0 / (1.0 + np.exp(-_uniform(rng, (1, 1, 4, 4))))
        g = (rng.random((1, 1, 4, 4)) < 0.5).astype(float)
        g.flat[0] = 1.0  # keep the union non-empty
        # Balance weights are detached, so both routes hold them at the base point.
        lam = L.balance_weight(p, g)
        cases.append(
            (f"weighted_bce #{k}", {"p": p}, lambda t, v, g=g, lam=lam: t.weighted_bce(v["p"], g, weights=lam))
        )
        cases.append((f"iou_loss #{k}", {"p": p}, lambda t, v, g=g: t.iou_loss(v["p"], g)))
    return cases


def toy_net(rng, channels=2, dtype=np.float64):
    """Two pyramid levels (4x4 and 2x2) with one DMC each, one MIF and two heads."""
    cfg = N.NetConfig(channels=channels)
    dmc1 = N.init_dmc(rng, 3, channels, cfg, dtype)
    dmc2 = N.init_dmc(rng, 4, channels, cfg, dtype)
    mif = N.init_mif(rng, channels, dtype)
    heads = tuple(N._conv(rng, ConvSpec(1, 1, channels, 1), dtype) for _ in range(2))
    # Non-trivial affine batch-norm parameters.
    mif = N.map_arrays(
        mif,
        lambda name, a: rng.uniform(0.5, 1.5, a.shape)
        if name.endswith("gamma")
        else rng.uniform(-0.3, 0.3, a.shape) if name.endswith("beta") else a,
    )
    return {"dmc1": dmc1, "dmc2": dmc2, "mif": mif, "heads": heads}


def toy_loss(ops, parts, x1, x2, g, weights=None):
    xd1 = N.dmc_forward(x1, parts["dmc1"], ops)
    xd2 = N.dmc_forward(x2, parts["dmc2"], ops)
    xm1 = N.adjacent_product(xd1, xd2, ops)
    xa1 = N.mif_forward(xm1, xd2, parts["mif"], ops)
    h, w = g.shape[2:]
    logits = [ops.resize_to(N.conv(ops, xa, head), h, w) for xa, head in zip((xa1, xd2), parts["heads"])]
    return L.total_loss_taped(ops, logits, g, weights=weights)


def toy_net_case(rng):
    parts = toy_net(rng)
    x1 = rng.uniform(-2, 2, size=(1, 3, 4, 4))
    x2 = rng.uniform(-2, 2, size=(1, 4, 2, 2))
    g = (rng.random((1, 1, 4, 4)) < 0.5).astype(float)
    g.flat[0] = 1.0
    flat = {}
    for key, part in parts.items():
        for name, arr in N._walk(part, key):
            if not N.is_buffer(name):
                flat[name] = arr

    from .autograd import Tape

    _, base = toy_loss(Tape(), parts, x1, x2, g)
    frozen = base.lambda_maps

    def fn(tape, v):
        rebuilt = {
            key: N.map_arrays(part, lambda name, a, key=key: v.get(f"{key}.{name}", a))
            for key, part in parts.items()
        }
        return toy_loss(tape, rebuilt, v["x1"], v["x2"], g, weights=frozen)[0]

    inputs = {"x1": x1, "x2": x2, **flat}
    return "total loss (toy 2-level net)", inputs, fn


def run_suite(seed: int = 42, tol: float = TOL, h: float = H, loss_pairs: int = 1, max_coords: int = 12):
    rng = np.random.default_rng(seed)
    reports = []
    for name, inputs, fn in op_cases(rng) + loss_cases(rng, loss_pairs):
        reports.append(finite_diff_check(fn, inputs, h=h, tol=tol, name=name))
    name, inputs, fn = toy_net_case(rng)
    reports.append(
        finite_diff_check(
            fn, inputs, h=h, tol=tol, name=name, max_coords=max_coords, rng=rng, skip_kinks=True
        )
    )
    return reports
