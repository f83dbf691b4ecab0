"""End-to-end acceptance checks; each test records one PASS/FAIL line for the summary."""
import json
import math
import time

import numpy as np
import pytest

from codnet import io as cio
from codnet import losses as L
from codnet import metrics as M
from codnet import network as N
from codnet import oracles as O
from codnet import tensor as T
from codnet.cli import main
from codnet.gradcheck import run_suite
from codnet.tensor import ConvSpec
from codnet.train import TrainConfig, synthetic_disk, train

CONV_TOL = 1e-6
CONV_SECONDS = 30
GRAD_TOL = 1e-4
GRAD_STEP = 1e-3
GRAD_SECONDS = 60
METRIC_TOL = 1e-6
LOSS_RESIDUE = 4e-4
BCE_HALF = 0.43145
BCE_TOL = 1e-5
TRAIN_SECONDS = 300
TRAIN_RATIO = 0.5

# (kh, kw, dilation) families the network relies on, plus generic square kernels
KERNELS = [(1, 5, 1), (5, 1, 1), (1, 7, 1), (7, 1, 1), (3, 3, 5), (3, 3, 7), (3, 3, 1), (1, 1, 1), (5, 5, 2)]


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))


def _random_conv_case(rng, index):
    kh, kw, dilation = KERNELS[index % len(KERNELS)]
    cin, cout = rng.integers(1, 4, size=2)
    h, w = rng.integers(4, 13, size=2)
    if rng.random() < 0.25:
        stride = int(rng.integers(2, 4))
        padding = tuple(int(v) for v in rng.integers(0, 3, size=2))
        h = max(h, (kh - 1) * dilation + 1)
        w = max(w, (kw - 1) * dilation + 1)
    else:
        stride, padding = 1, (T.same_padding(kh, dilation), T.same_padding(kw, dilation))
    spec = ConvSpec(kh, kw, int(cin), int(cout), dilation=dilation, stride=stride, padding=padding)
    x = rng.standard_normal((1, cin, h, w))
    wts = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(cout)
    return x, wts, b, spec


def test_ac1_conv_matches_oracle(record_criterion):
    rng = np.random.default_rng(42)
    start = time.perf_counter()
    worst = worst32 = 0.0
    cases = 240
    for i in range(cases):
        x, wts, b, spec = _random_conv_case(rng, i)
        ref = T.conv2d_oracle(x, wts, b, spec)
        worst = max(worst, _rel(T.conv2d(x, wts, b, spec), ref), _rel(T.conv2d_im2col(x, wts, b, spec), ref))
        x32, w32, b32 = x.astype(np.float32), wts.astype(np.float32), b.astype(np.float32)
        worst32 = max(worst32, _rel(T.conv2d(x32, w32, b32, spec).astype(np.float64), ref))
    seconds = time.perf_counter() - start
    passed = worst < CONV_TOL and worst32 < 1e-5 and seconds < CONV_SECONDS
    record_criterion(1, "conv oracle equivalence", passed,
                     f"{cases} cases  worst f64 {worst:.2e}  worst f32 {worst32:.2e}  {seconds:.1f}s")
    assert passed


def test_ac2_gradient_suite(record_criterion):
    start = time.perf_counter()
    reports = run_suite(seed=42, tol=GRAD_TOL, h=GRAD_STEP)
    seconds = time.perf_counter() - start
    failed = [r.op for r in reports if not r.passed]
    ops = {r.op for r in reports}
    covers_losses = any("bce" in op for op in ops) and any("iou" in op for op in ops)
    passed = not failed and covers_losses and seconds < GRAD_SECONDS
    record_criterion(2, "finite-difference gradients", passed,
                     f"{len(reports) - len(failed)}/{len(reports)} checks  {seconds:.1f}s  failed={failed}")
    assert passed, failed


def _gt_fixture(rng):
    h, w = rng.integers(8, 33, size=2)
    g = (rng.random((h, w)) < rng.uniform(0.01, 0.8)).astype(float)
    if not g.any():
        g[rng.integers(h), rng.integers(w)] = 1
    return g


def test_ac3_metric_identities(record_criterion):
    rng = np.random.default_rng(42)
    worst, exact = 0.0, True
    for _ in range(100):
        g = _gt_fixture(rng)
        scores = (M.s_measure(g, g).s_alpha, M.e_measure(g, g), M.weighted_f_measure(g, g))
        worst = max(worst, max(abs(1 - s) for s in scores), M.mae(g, g))
        exact &= M.mae(1 - g, g) == 1.0 and M.weighted_f_measure(1 - g, g) == 0.0
    passed = worst < METRIC_TOL and exact
    record_criterion(3, "metric identities", passed, f"100 fixtures  worst |1-score| {worst:.2e}  inverted exact={exact}")
    assert passed


def test_ac4_metric_oracles(record_criterion):
    rng = np.random.default_rng(7)
    worst = {"s": 0.0, "e": 0.0, "fw": 0.0}
    for i in range(100):
        h, w = rng.integers(8, 17, size=2)
        p = rng.random((h, w))
        if i % 3 == 0:
            p = np.round(p * 4) / 4
        g = (rng.random((h, w)) < rng.uniform(0.05, 0.7)).astype(float)
        if not g.any():
            g[0, 0] = 1
        P, G = p.tolist(), g.tolist()
        worst["s"] = max(worst["s"], abs(M.s_measure(p, g).s_alpha - O.s_measure(P, G)))
        worst["e"] = max(worst["e"], abs(M.e_measure(p, g) - O.e_measure(P, G)))
        worst["fw"] = max(worst["fw"], abs(M.weighted_f_measure(p, g) - O.weighted_f_measure(P, G)))
    passed = max(worst.values()) < METRIC_TOL
    detail = "100 maps  " + "  ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_criterion(4, "metric oracle equivalence", passed, detail)
    assert passed


def test_ac5_architecture_contract(record_criterion):
    net = N.build_net(seed=42)
    image = np.random.default_rng(0).uniform(0, 1, (1, 3, 352, 352)).astype(np.float32)
    pyr, preds = N.network_forward(image, net)
    shapes_ok = [p.shape for p in preds.p] == [(1, 1, 352, 352)] * 4
    strides = tuple(352 // x.shape[2] for x in pyr.x)
    identity = pyr.xa[3] is pyr.xd[3]
    top, bottom = N.dmc_paths(net.dmc[0])
    rf = (N.effective_receptive_field(top), N.effective_receptive_field(bottom))
    passed = shapes_ok and strides == (4, 8, 16, 32) and identity and rf == ((19, 19), (25, 25))
    record_criterion(5, "architecture shape contract", passed,
                     f"maps ok={shapes_ok}  strides {strides}  xa4 is xd4={identity}  rf {rf[0]}/{rf[1]}")
    assert passed


def test_ac6_loss_contract(record_criterion):
    rng = np.random.default_rng(42)
    iou_ok = True
    for _ in range(20):
        g = _gt_fixture(rng)
        iou_ok &= L.iou_loss(g, g) == 0.0 and L.iou_loss(1 - g, g) == 1.0
    g = _gt_fixture(rng)
    perfect = [np.where(g > 0, 40.0, -40.0)] * 4
    residue = L.total_loss(perfect, g).total
    bce = L.weighted_bce(np.array([0.5]), np.array([1.0]))
    bce_ok = abs(bce - BCE_HALF) <= BCE_TOL and bce == pytest.approx(math.log(2) / (1 + math.exp(-0.5)), rel=1e-12)
    passed = iou_ok and residue < LOSS_RESIDUE and bce_ok
    record_criterion(6, "loss contract", passed, f"iou identities={iou_ok}  perfect total {residue:.2e}  bce(0.5,1) {bce:.6f}")
    assert passed


@pytest.mark.slow
def test_ac7_overfit_demo(record_criterion):
    image, mask = synthetic_disk(64, seed=42, dtype=np.float64)
    net = N.build_net(42, config=N.NetConfig(bn_training=True), dtype=np.float64)
    config = TrainConfig(steps=200, lr=0.005, weight_decay=0.0005, momentum=0.95)
    result = train(net, image, mask, config)
    passed = result.ratio < TRAIN_RATIO and result.seconds < TRAIN_SECONDS and np.isfinite(result.losses).all()
    record_criterion(7, "overfit demo", passed,
                     f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}  ratio {result.ratio:.3f}  {result.seconds:.0f}s")
    assert passed


def _dataset(root):
    rng = np.random.default_rng(5)
    for sub in ("pred", "gt"):
        (root / sub).mkdir()
    for i in range(5):
        g = (rng.random((24, 20)) < 0.3).astype(float)
        g[3, 3] = 1
        cio.write_map(g, root / "gt" / f"im{i}.pgm")
        cio.write_map(np.clip(g * 0.7 + rng.random(g.shape) * 0.4, 0, 1), root / "pred" / f"im{i}.pgm")


def test_ac8_determinism(tmp_path, record_criterion):
    image = tmp_path / "img.pgm"
    cio.write_map(np.random.default_rng(3).random((70, 90)), image)
    _dataset(tmp_path)
    outputs = []
    for run, threads in enumerate((1, 1, 4)):
        out = tmp_path / f"run{run}"
        rc_f = main(["forward", "--image", str(image), "--out-dir", str(out), "--size", "96", "--threads", str(threads)])
        rc_e = main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"),
                     "--out", str(out / "report.json"), "--threads", str(threads)])
        assert rc_f == rc_e == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    names = sorted(outputs[0])
    identical = outputs[0] == outputs[1] == outputs[2]
    record_criterion(8, "determinism", identical, f"{len(names)} files x 3 runs (threads 1,1,4) identical={identical}")
    assert identical and json.loads(outputs[0]["manifest.json"])


def test_ac9_format_round_trips(tmp_path, fixtures_dir, record_criterion):
    net = N.build_net(seed=42)
    first, second = tmp_path / "a.bin", tmp_path / "b.bin"
    cio.save_weights(net, first)
    cio.save_weights(N.load_state(N.build_net(seed=0), cio.load_weights(first)), second)
    archive_ok = first.read_bytes() == second.read_bytes()
    ramp = cio.read_map(fixtures_dir / "ramp_p2.pgm").normalized()
    p2_ok = np.array_equal(ramp, np.array([[0, 51, 102], [153, 204, 255]]) / 255)
    raw = tmp_path / "all.pgm"
    raw.write_bytes(b"P5\n16 16\n255\n" + bytes(range(256)))
    p5_ok = np.array_equal(cio.read_normalized(raw).ravel(), np.arange(256) / 255)
    passed = archive_ok and p2_ok and p5_ok
    record_criterion(9, "format round-trips", passed,
                     f"archive identical={archive_ok} ({first.stat().st_size} bytes)  P2 exact={p2_ok}  P5 exact={p5_ok}")
    assert passed
