"""Single-image SGD loop used by the overfit demo."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import network as N
from .autograd import SGD, Tape, Var

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 0.005
    weight_decay: float = 0.0005
    momentum: float = 0.95
    # Mean over pixels keeps the step size independent of image size.
    normalized_loss: bool = True
    log_every: int = 10


@dataclass
class TrainResult:
    net: N.McifNet
    losses: list = field(default_factory=list)  # loss before update k, plus the final loss
    seconds: float = 0.0

    @property
    def ratio(self) -> float:
        return self.losses[-1] / self.losses[0]


def synthetic_disk(size: int = 64, seed: int = 42, dtype=np.float32):
    """A noisy brighter disk on a darker background; returns (image NCHW, mask NCHW)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    cy, cx, r = 0.47 * size, 0.53 * size, 0.22 * size
    mask = (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(dtype)[None, None]
    noise = 0.1 * rng.standard_normal((1, 3, size, size))
    image = (0.35 + 0.3 * mask + noise).astype(dtype)
    return image, mask


def loss_and_grads(net: N.McifNet, image, mask, normalized: bool = True):
    tape = Tape()
    live = N.attach(net, tape)
    _, pred = N.network_forward(image, live, tape)
    total, breakdown = L.total_loss_taped(tape, pred.p, mask, normalized=normalized)
    tape.backward(total)
    grads = {v.name: tape.grad(v) for _, v in N.named_arrays(live) if isinstance(v, Var)}
    return breakdown, grads


def train(net: N.McifNet, image, mask, config: TrainConfig = TrainConfig(), callback=None) -> TrainResult:
    """Run ``config.steps`` SGD updates and record the loss before each one and after the last."""
    opt = SGD(config.lr, config.weight_decay, config.momentum)
    params = {k: v for k, v in N.named_arrays(net) if not N.is_buffer(k)}
    result = TrainResult(net)
    start = time.perf_counter()
    for step in range(config.steps + 1):
        breakdown, grads = loss_and_grads(net, image, mask, config.normalized_loss)
        result.losses.append(breakdown.total)
        if callback is not None:
            callback(step, breakdown)
        if step == config.steps:
            break
        params = opt.step(params, grads)
        net = N.map_arrays(net, lambda name, arr: params.get(name, arr))
    result.net = net
    result.seconds = time.perf_counter() - start
    return result
