"""Regenerate tests/fixtures/eval4: four synthetic pairs plus oracle-computed scores.

The expected values come from the pure-Python definitions in codnet.oracles,
evaluated on the 8-bit maps exactly as they are stored on disk.

    python scripts/make_eval_fixtures.py [--out tests/fixtures/eval4]
"""
import argparse
import json
from pathlib import Path

import numpy as np

from codnet import io, oracles


def make_pairs(rng):
    yy, xx = np.mgrid[:16, :20]
    blob = ((yy - 7) ** 2 + (xx - 9) ** 2 <= 20).astype(float)
    bar = ((xx > 3) & (xx < 8)).astype(float)
    corner = ((yy < 5) & (xx > 14)).astype(float)
    speckle = (rng.random((16, 20)) < 0.25).astype(float)
    gts = {"blob": blob, "bar": bar, "corner": corner, "speckle": speckle}
    preds = {
        "blob": np.clip(blob * 0.8 + rng.random((16, 20)) * 0.3, 0, 1),
        "bar": np.roll(bar, 1, axis=1) * 0.9,
        "corner": rng.random((16, 20)),
        "speckle": np.clip(speckle + rng.normal(0, 0.2, (16, 20)), 0, 1),
    }
    return {k: (preds[k], gts[k]) for k in gts}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "tests/fixtures/eval4")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    (args.out / "pred").mkdir(parents=True, exist_ok=True)
    (args.out / "gt").mkdir(parents=True, exist_ok=True)
    expected = {}
    for name, (p, g) in make_pairs(np.random.default_rng(args.seed)).items():
        io.write_map(p, args.out / "pred" / f"{name}.pgm")
        io.write_map(g, args.out / "gt" / f"{name}.pgm")
        # score what was written, not the float maps
        ps = io.read_normalized(args.out / "pred" / f"{name}.pgm").tolist()
        gs = io.read_normalized(args.out / "gt" / f"{name}.pgm").tolist()
        expected[name] = {
            "s_alpha": oracles.s_measure(ps, gs),
            "e_phi": oracles.e_measure(ps, gs),
            "f_beta_w": oracles.weighted_f_measure(ps, gs),
            "mae": oracles.mae(ps, gs),
        }
    (args.out / "expected.json").write_text(json.dumps(expected, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(expected)} pairs to {args.out}")


if __name__ == "__main__":
    main()
