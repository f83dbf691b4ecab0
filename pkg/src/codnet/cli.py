"""codnet command line: metric evaluation, curves, forward pass, gradient check, overfit demo, kernel benchmark.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or missing
inputs), 3 internal error or a failed self-check.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as cio
from . import metrics as M
from . import network as N
from . import tensor as T

log = logging.getLogger("codnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DTYPES = {"f32": np.float32, "f64": np.float64}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _metric_list(text: str):
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in names if m not in M.ALL_METRICS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"metrics must be a comma list of {','.join(M.ALL_METRICS)}")
    return names


def _size(text: str) -> int:
    value = int(text)
    if value <= 0 or value % 32:
        raise argparse.ArgumentTypeError("size must be a positive multiple of 32")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="RNG seed (default 42)")
    common.add_argument("--precision", choices=sorted(DTYPES), default="f32", help="float precision (default f32)")
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: CODNET_THREADS or available cores)",
    )
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))

    parser = _Parser(prog="codnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"codnet {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("eval", parents=[common], help="score prediction maps against ground truth")
    p.add_argument("--pred", required=True, type=Path, help="directory of prediction maps")
    p.add_argument("--gt", required=True, type=Path, help="directory of ground-truth masks")
    p.add_argument("--metrics", type=_metric_list, default=M.ALL_METRICS, help="comma list from s,e,fw,mae")
    p.add_argument("--out", type=Path, help="report file (default: print JSON to stdout)")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="report format (default json)")

    p = sub.add_parser("curves", parents=[common], help="dataset-mean PR and F curves as CSV")
    p.add_argument("--pred", required=True, type=Path, help="directory of prediction maps")
    p.add_argument("--gt", required=True, type=Path, help="directory of ground-truth masks")
    p.add_argument("--out", required=True, type=Path, help="output CSV with one row per threshold")

    p = sub.add_parser("forward", parents=[common], help="run the network on one image")
    p.add_argument("--image", required=True, type=Path, help="input PGM or PNG")
    p.add_argument("--weights", type=Path, help="weight archive (default: seeded initialization)")
    p.add_argument("--save-weights", type=Path, help="also write the weights used to this archive")
    p.add_argument("--out-dir", required=True, type=Path, help="directory for p1..p4 maps and manifest")
    p.add_argument("--size", type=_size, default=352, help="square input size, multiple of 32 (default 352)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the loss")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error tolerance (default 1e-4)")
    p.add_argument("--step", type=float, default=1e-3, help="central difference step h (default 1e-3)")

    p = sub.add_parser("train-demo", parents=[common], help="overfit one image with SGD")
    p.add_argument("--image", type=Path, help="input image (default: synthetic disk)")
    p.add_argument("--gt", type=Path, help="ground-truth mask for --image")
    p.add_argument("--steps", type=int, default=200, help="SGD updates (default 200)")
    p.add_argument("--size", type=_size, default=64, help="square training size (default 64)")

    p = sub.add_parser("bench", parents=[common], help="time kernels and compare against the oracle")
    p.add_argument("--op", choices=("conv2d",), default="conv2d", help="kernel to benchmark")
    p.add_argument("--cases", type=Path, help="JSON list of conv cases (default: built-in set)")
    p.add_argument("--repeat", type=int, default=3, help="timed repetitions per case (default 3)")
    return parser


# -- helpers -----------------------------------------------------------------


def _resolve(args) -> dict:
    threads = args.threads
    if threads is None:
        threads = T.get_num_threads()
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    args.threads = threads
    T.set_num_threads(threads)
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    config["version"] = __version__
    log.info("config %s", json.dumps(config, sort_keys=True, default=str))
    return config


def _load_pairs(pred_dir, gt_dir):
    try:
        matched = cio.pair_dataset(pred_dir, gt_dir)
    except (FileNotFoundError, LookupError) as exc:
        raise DataError(str(exc)) from None
    pairs = []
    for stem, pred_path, gt_path in matched:
        try:
            p, g = cio.read_normalized(pred_path), cio.read_normalized(gt_path)
        except cio.FormatError as exc:
            raise DataError(str(exc)) from None
        if p.shape != g.shape:
            raise DataError(f"{stem}: prediction {p.shape} and ground truth {g.shape} differ in size")
        pairs.append((stem, p, g))
    log.info("matched %d image pairs", len(pairs))
    return pairs


def _write(path: Path, data: bytes):
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise DataError(f"{path}: cannot write ({exc.strerror})") from None


# -- subcommands ---------------------------------------------------------------


def cmd_eval(args) -> int:
    pairs = _load_pairs(args.pred, args.gt)
    try:
        report = M.evaluate_dataset(pairs, metrics=args.metrics, threads=args.threads)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for name in report.skipped:
        log.warning("%s: empty ground truth, left out of the means", name)
    data = cio.encode_report(report, args.format, __version__)
    if args.out:
        _write(args.out, data)
    else:
        sys.stdout.write(data.decode())
    agg = report.aggregate
    parts = [f"{k}={v:.6f}" for k, v in (("S", agg.s_alpha), ("E", agg.e_phi), ("Fw", agg.f_beta_w), ("MAE", agg.mae)) if v is not None]
    print(f"{len(report.rows) - len(report.skipped)} images  " + "  ".join(parts))
    return EXIT_OK


def cmd_curves(args) -> int:
    pairs = _load_pairs(args.pred, args.gt)
    try:
        curve, skipped = M.dataset_curve(pairs)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for name in skipped:
        log.warning("%s: empty ground truth, left out of the curve", name)
    _write(args.out, cio.encode_curve(curve))
    best = int(np.argmax(curve.f_measure))
    print(f"max F={curve.f_measure[best]:.6f} at threshold {curve.thresholds[best]:.4f}")
    return EXIT_OK


def cmd_forward(args) -> int:
    dtype = DTYPES[args.precision]
    try:
        rgb = cio.read_image(args.image)
    except cio.FormatError as exc:
        raise DataError(str(exc)) from None
    net = N.build_net(args.seed, dtype=dtype)
    if args.weights:
        try:
            state = cio.load_weights(args.weights)
            net = N.load_state(net, {k: v.astype(dtype, copy=False) for k, v in state.items()})
        except (cio.FormatError, KeyError, T.ShapeError) as exc:
            raise DataError(f"{args.weights}: {exc}") from None
    if args.save_weights:
        cio.save_weights(net, args.save_weights)
    x = T.resize_to(rgb[None].astype(dtype), args.size, args.size)
    start = time.perf_counter()
    pyramid, preds = N.network_forward(x, net)
    log.info("forward %dx%d in %.2fs", args.size, args.size, time.perf_counter() - start)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "image": args.image.name,
        "input": list(x.shape),
        "pyramid": {
            level: [list(t.shape) for t in getattr(pyramid, level)] for level in ("x", "xd", "xm", "xa")
        },
        "maps": {},
    }
    for i, prob in enumerate(preds.probabilities(), start=1):
        name = f"p{i}.pgm"
        _write(args.out_dir / name, cio.encode_pgm(prob[0, 0]))
        manifest["maps"][name] = list(prob.shape[2:])
    _write(args.out_dir / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    print(f"wrote {len(manifest['maps'])} maps to {args.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    start = time.perf_counter()
    reports = run_suite(args.seed, tol=args.tol, h=args.step)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(r)
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {time.perf_counter() - start:.1f}s")
    if failed:
        raise CheckFailed(f"{len(failed)} gradient checks failed: {', '.join(r.op for r in failed)}")
    return EXIT_OK


def cmd_train_demo(args) -> int:
    from .train import TrainConfig, synthetic_disk, train

    dtype = DTYPES[args.precision]
    if (args.image is None) != (args.gt is None):
        raise UsageError("--image and --gt must be given together")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    if args.image is None:
        image, mask = synthetic_disk(args.size, args.seed, dtype)
    else:
        try:
            rgb, gt = cio.read_image(args.image), cio.read_normalized(args.gt)
        except cio.FormatError as exc:
            raise DataError(str(exc)) from None
        image = T.resize_to(rgb[None].astype(dtype), args.size, args.size)
        mask = (T.resize_to(gt[None, None].astype(dtype), args.size, args.size) >= 0.5).astype(dtype)
    net = N.build_net(args.seed, config=N.NetConfig(bn_training=True), dtype=dtype)
    config = TrainConfig(steps=args.steps)

    def show(step, breakdown):
        if step % config.log_every == 0 or step == config.steps:
            print(f"step {step:4d}  loss {breakdown.total:.6f}", flush=True)

    result = train(net, image, mask, config, callback=show)
    print(f"initial {result.losses[0]:.6f}  final {result.losses[-1]:.6f}  ratio {result.ratio:.4f}  {result.seconds:.1f}s")
    if not result.ratio < 0.5:
        raise CheckFailed(f"final loss is {result.ratio:.3f} of the initial loss; expected < 0.5")
    return EXIT_OK


DEFAULT_BENCH_CASES = [
    {"c": 8, "cout": 8, "h": 32, "w": 32, "kh": 3, "kw": 3},
    {"c": 8, "cout": 8, "h": 32, "w": 32, "kh": 1, "kw": 5},
    {"c": 8, "cout": 8, "h": 32, "w": 32, "kh": 7, "kw": 1},
    {"c": 8, "cout": 8, "h": 32, "w": 32, "kh": 3, "kw": 3, "dilation": 5},
    {"c": 8, "cout": 8, "h": 32, "w": 32, "kh": 3, "kw": 3, "dilation": 7},
    {"c": 3, "cout": 16, "h": 64, "w": 64, "kh": 4, "kw": 4, "stride": 4, "padding": [0, 0]},
]


def _bench_spec(case: dict) -> T.ConvSpec:
    kh, kw, d = case["kh"], case["kw"], case.get("dilation", 1)
    pad = case.get("padding")
    if pad is None:
        pad = (T.same_padding(kh, d), T.same_padding(kw, d))
    return T.ConvSpec(kh, kw, case["c"], case["cout"], dilation=d, stride=case.get("stride", 1), padding=tuple(pad))


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter_ns()
        fn()
        best = min(best, time.perf_counter_ns() - start)
    return best


def cmd_bench(args) -> int:
    if args.cases:
        try:
            cases = json.loads(args.cases.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{args.cases}: {exc}") from None
    else:
        cases = DEFAULT_BENCH_CASES
    rng = np.random.default_rng(args.seed)
    dtype = DTYPES[args.precision]
    worst = 0.0
    print("case  kernel  dil  stride  ordered_ns/op  im2col_ns/op  rel_err_vs_oracle")
    for i, case in enumerate(cases):
        try:
            spec = _bench_spec(case)
        except (KeyError, ValueError) as exc:
            raise DataError(f"case {i}: {exc}") from None
        x = rng.standard_normal((case.get("n", 1), case["c"], case["h"], case["w"])).astype(dtype)
        wts = rng.standard_normal(spec.weight_shape).astype(dtype)
        bias = rng.standard_normal(spec.out_channels).astype(dtype)
        out = T.conv2d(x, wts, bias, spec)
        macs = out.size * spec.in_channels * spec.kernel_h * spec.kernel_w
        t_ord = _time(lambda: T.conv2d(x, wts, bias, spec, threads=args.threads), args.repeat)
        t_col = _time(lambda: T.conv2d_im2col(x, wts, bias, spec), args.repeat)
        ref = T.conv2d_oracle(x.astype(np.float64), wts.astype(np.float64), bias.astype(np.float64), spec)
        fast = T.conv2d_im2col(x, wts, bias, spec).astype(np.float64)
        err = float(np.max(np.abs(fast - ref)) / max(np.max(np.abs(ref)), 1e-30))
        worst = max(worst, err)
        print(
            f"{i:4d}  {spec.kernel_h}x{spec.kernel_w}  {spec.dilation:3d}  {spec.stride:6d}  "
            f"{t_ord / macs:13.3f}  {t_col / macs:12.3f}  {err:.2e}"
        )
    print(f"worst relative error {worst:.2e}")
    if not worst < 1e-5:
        raise CheckFailed("im2col path disagrees with the oracle beyond 1e-5")
    return EXIT_OK


COMMANDS = {
    "eval": cmd_eval,
    "curves": cmd_curves,
    "forward": cmd_forward,
    "gradcheck": cmd_gradcheck,
    "train-demo": cmd_train_demo,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _resolve(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except CheckFailed as exc:
        log.error("%s", exc)
        return EXIT_INTERNAL
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
