"""Overfit the network on one synthetic disk image and print the loss curve.

    python scripts/overfit_demo.py [--steps 200] [--size 64] [--csv losses.csv]
"""
import argparse
import csv
import logging

import numpy as np

from codnet import network as N
from codnet.train import TrainConfig, synthetic_disk, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--lr", type=float, default=0.005)
    ap.add_argument("--csv", help="write step,loss rows here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    image, mask = synthetic_disk(args.size, args.seed, dtype=np.float64)
    net = N.build_net(args.seed, config=N.NetConfig(bn_training=True), dtype=np.float64)
    config = TrainConfig(steps=args.steps, lr=args.lr)

    def log(step, br):
        if step % config.log_every == 0 or step == config.steps:
            logging.info("step %4d  total %.5f", step, br.total)

    result = train(net, image, mask, config, callback=log)
    print(f"initial {result.losses[0]:.5f}  final {result.losses[-1]:.5f}  "
          f"ratio {result.ratio:.4f}  {result.seconds:.1f}s")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(enumerate(result.losses))
    return 0 if result.ratio < 0.5 else 1


if __name__ == "__main__":
    raise SystemExit(main())
