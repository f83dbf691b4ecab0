"""Print the conv chain and receptive field of both branches of each DMC module.

Also confirms the closed-form value with an impulse probe: the support of the
gradient of one output pixel through the chain.

    python scripts/receptive_fields.py
"""
import numpy as np

from codnet import network as N
from codnet import tensor as T
from codnet.autograd import Tape


def probe(chain, size=41):
    """Measured support of d out[c, c] / d input for a random-weight chain."""
    rng = np.random.default_rng(0)
    tape = Tape()
    x = tape.leaf(np.zeros((1, chain[0].in_channels, size, size)))
    y = x
    for spec in chain:
        w = tape.leaf(rng.uniform(0.5, 1.0, spec.weight_shape))
        y = tape.conv2d(y, w, None, spec)
    c = size // 2
    onehot = np.zeros(y.value.shape)
    onehot[0, 0, c, c] = 1
    tape.backward(tape.dot(y, onehot))
    support = np.abs(tape.grad(x)).sum(axis=(0, 1)) > 0
    rows, cols = np.nonzero(support)
    return int(np.ptp(rows)) + 1, int(np.ptp(cols)) + 1


def main():
    net = N.build_net(seed=42, config=N.NetConfig(channels=4, backbone_channels=(4, 4, 4, 4)), dtype=np.float64)
    top, bottom = N.dmc_paths(net.dmc[0])
    for name, chain in (("top", top), ("bottom", bottom)):
        steps = "  ".join(f"{s.kernel_h}x{s.kernel_w}" + (f"@d{s.dilation}" if s.dilation > 1 else "") for s in chain)
        print(f"{name:6s} {steps}")
        print(f"{'':6s} rf closed form {N.effective_receptive_field(chain)}  measured {probe(chain)}")
    print("same padding, k=3 d=5:", T.same_padding(3, 5))


if __name__ == "__main__":
    main()
