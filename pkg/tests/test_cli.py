import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from codnet import io as cio
from codnet.cli import build_parser, main


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(11)
    gt, pred, inv = tmp_path / "gt", tmp_path / "pred", tmp_path / "inv"
    for d in (gt, pred, inv):
        d.mkdir()
    for i in range(4):
        g = (rng.random((16, 12)) < 0.3).astype(float)
        g[0, 0] = 1
        cio.write_map(g, gt / f"im{i}.pgm")
        cio.write_map(g, pred / f"im{i}.pgm")
        cio.write_map(1 - g, inv / f"im{i}.pgm")
    return tmp_path


@pytest.fixture
def image(tmp_path):
    path = tmp_path / "img.pgm"
    cio.write_map(np.random.default_rng(2).random((40, 50)), path)
    return path


def run(*argv):
    return main([str(a) for a in argv])


def test_help_exits_zero_and_lists_flags(capsys):
    assert run("--help") == 0
    assert run("eval", "--help") == 0
    out = capsys.readouterr().out
    for flag in ("--pred", "--gt", "--metrics", "--out", "--format", "--seed", "--precision", "--threads"):
        assert flag in out


@pytest.mark.parametrize(
    "argv",
    [["bogus"], [], ["eval", "--pred", "x"], ["eval", "--pred", "a", "--gt", "b", "--wat"],
     ["eval", "--pred", "a", "--gt", "b", "--metrics", "psnr"], ["forward", "--image", "i", "--out-dir", "o", "--size", "50"]],
)
def test_usage_errors_exit_one(argv, capsys):
    assert run(*argv) == 1


def test_eval_perfect_and_inverted(dataset, capsys):
    out = dataset / "r.json"
    assert run("eval", "--pred", dataset / "pred", "--gt", dataset / "gt", "--out", out) == 0
    agg = json.loads(out.read_text())["aggregate"]
    for key, want in (("s_alpha", 1), ("e_phi", 1), ("f_beta_w", 1), ("mae", 0)):
        assert agg[key] == pytest.approx(want, abs=1e-6)
    assert "S=1.000000" in capsys.readouterr().out
    assert run("eval", "--pred", dataset / "inv", "--gt", dataset / "gt", "--out", out, "--format", "csv") == 0
    rows = list(csv.DictReader(out.open()))
    assert float(rows[-1]["mae"]) == 1.0


def test_eval_matches_recorded_oracle_fixture(fixtures_dir, tmp_path):
    root = fixtures_dir / "eval4"
    out = tmp_path / "r.json"
    assert run("eval", "--pred", root / "pred", "--gt", root / "gt", "--out", out) == 0
    rows = {r["image"]: r for r in json.loads(out.read_text())["rows"]}
    expected = json.loads((root / "expected.json").read_text())
    assert set(rows) == set(expected)
    for name, values in expected.items():
        for key, want in values.items():
            assert rows[name][key] == pytest.approx(want, abs=1e-6), (name, key)


def test_eval_selected_metrics_to_stdout(dataset, capsys):
    assert run("eval", "--pred", dataset / "pred", "--gt", dataset / "gt", "--metrics", "mae,s") == 0
    out = capsys.readouterr().out
    doc = json.loads(out[: out.rindex("}") + 1])
    assert doc["metrics"] == ["s", "mae"] and doc["aggregate"]["e_phi"] is None


def test_eval_data_errors_exit_two(dataset, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("eval", "--pred", empty, "--gt", dataset / "gt") == 2
    assert run("eval", "--pred", tmp_path / "missing", "--gt", dataset / "gt") == 2
    (dataset / "pred" / "im0.pgm").write_bytes(b"P5\n3 3\n255\n")
    assert run("eval", "--pred", dataset / "pred", "--gt", dataset / "gt") == 2


def test_eval_output_independent_of_threads(dataset):
    outs = []
    for threads in (1, 4):
        path = dataset / f"t{threads}.csv"
        assert run("eval", "--pred", dataset / "pred", "--gt", dataset / "gt", "--out", path,
                   "--format", "csv", "--threads", threads) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_curves(dataset):
    out = dataset / "c.csv"
    assert run("curves", "--pred", dataset / "pred", "--gt", dataset / "gt", "--out", out) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 256
    assert all(float(r["precision"]) == 1.0 for r in rows)
    assert run("curves", "--pred", dataset / "inv", "--gt", dataset / "gt", "--out", out) == 0
    recall = [float(r["recall"]) for r in csv.DictReader(out.open())]
    assert all(b <= a for a, b in zip(recall, recall[1:]))


def test_forward_outputs_and_determinism(image, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    weights = tmp_path / "w.bin"
    assert run("forward", "--image", image, "--out-dir", a, "--size", 64, "--save-weights", weights, "--threads", 1) == 0
    assert run("forward", "--image", image, "--out-dir", b, "--size", 64, "--weights", weights, "--seed", 9, "--threads", 3) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["maps"] == {f"p{i}.pgm": [64, 64] for i in range(1, 5)}
    for name in ["manifest.json"] + list(manifest["maps"]):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for name in manifest["maps"]:
        assert cio.read_map(a / name).samples.shape == (64, 64)


def test_forward_unreadable_image_exits_two(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert run("forward", "--image", bad, "--out-dir", tmp_path / "o", "--size", 32) == 2


def test_bench_with_cases_file(tmp_path, capsys):
    cases = tmp_path / "cases.json"
    cases.write_text(json.dumps([{"c": 2, "cout": 3, "h": 9, "w": 9, "kh": 1, "kw": 7},
                                 {"c": 2, "cout": 2, "h": 12, "w": 12, "kh": 3, "kw": 3, "dilation": 5}]))
    assert run("bench", "--op", "conv2d", "--cases", cases, "--repeat", 1) == 0
    assert "worst relative error" in capsys.readouterr().out
    cases.write_text("[{\"c\": 1}]")
    assert run("bench", "--cases", cases) == 2


def test_train_demo_rejects_half_inputs(tmp_path, image):
    assert run("train-demo", "--image", image) == 1


@pytest.mark.slow
def test_gradcheck_subcommand(capsys):
    assert run("gradcheck", "--seed", 42) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "codnet", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "codnet" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "codnet", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1


def test_parser_defaults():
    args = build_parser().parse_args(["forward", "--image", "x", "--out-dir", "o"])
    assert (args.seed, args.size, args.precision) == (42, 352, "f32")
