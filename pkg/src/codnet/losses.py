"""Balanced BCE + IoU objective with analytic gradients.

Probabilities ``p`` and masks ``g`` are arrays of any matching shape. The
per-pixel balance weight ``sigmoid(|p - g|)`` is a constant during
differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class ClampConfig:
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not 0 < self.eps < 0.5:
            raise ValueError("clamp eps must lie in (0, 0.5)")


@dataclass
class LossBreakdown:
    lambda_maps: list  # one balance-weight map per level
    bce: list
    iou: list
    total: float

    @property
    def levels(self) -> int:
        return len(self.bce)

    def level_total(self, i: int) -> float:
        return self.bce[i] + self.iou[i]


def _check_pair(p, g):
    p, g = np.asarray(p), np.asarray(g)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth must be binary (0/1); binarize it first")
    return p, g


def binarize(g, threshold: float = 0.5) -> np.ndarray:
    g = np.asarray(g)
    return (g >= threshold).astype(g.dtype if g.dtype.kind == "f" else np.float64)


def balance_weight(p, g) -> np.ndarray:
    p, g = _check_pair(p, g)
    return 1.0 / (1.0 + np.exp(-np.abs(p - g)))


def weighted_bce(p, g, eps: float = DEFAULT_EPS, normalized: bool = False, weights=None) -> float:
    """Sum over pixels of ``-lambda * (g log p + (1-g) log(1-p))``.

    ``normalized`` divides by the pixel count; the default is the plain sum.
    ``weights`` overrides the balance map (e.g. one frozen at another point).
    """
    p, g = _check_pair(p, g)
    lam = balance_weight(p, g) if weights is None else np.asarray(weights)
    pc = np.clip(p, eps, 1 - eps)
    loss = -np.sum(lam * (g * np.log(pc) + (1 - g) * np.log(1 - pc)))
    if normalized:
        loss /= p.size
    return float(loss)


def weighted_bce_grad(p, g, eps: float = DEFAULT_EPS, normalized: bool = False, weights=None) -> np.ndarray:
    # Evaluated at the clamped probability and passed straight through the clamp.
    p, g = _check_pair(p, g)
    lam = balance_weight(p, g) if weights is None else np.asarray(weights)
    pc = np.clip(p, eps, 1 - eps)
    grad = -lam * (g / pc - (1 - g) / (1 - pc))
    if normalized:
        grad = grad / p.size
    return grad.astype(p.dtype, copy=False)


def iou_loss(p, g) -> float:
    """``1 - sum(p*g) / sum(p + g - p*g)``; 0 when both maps are empty."""
    p, g = _check_pair(p, g)
    inter = np.sum(p * g)
    union = np.sum(p + g - p * g)
    if union == 0:
        return 0.0
    return float(1.0 - inter / union)


def iou_loss_grad(p, g) -> np.ndarray:
    p, g = _check_pair(p, g)
    inter = np.sum(p * g)
    union = np.sum(p + g - p * g)
    if union == 0:
        return np.zeros_like(p)
    return (-(g * union - inter * (1 - g)) / union**2).astype(p.dtype, copy=False)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def total_loss(logits, g, eps: float = DEFAULT_EPS, normalized: bool = False) -> LossBreakdown:
    """Deep-supervision loss summed over every prediction level.

    ``logits`` is a sequence of maps at the ground truth's resolution;
    probabilities are ``sigmoid(logits)``. ``g`` is binarized at 0.5.
    """
    g = binarize(np.asarray(g, dtype=np.float64))
    lams, bces, ious = [], [], []
    for level, logit in enumerate(logits):
        logit = np.asarray(logit)
        if logit.shape != g.shape:
            raise ValueError(f"level {level + 1} prediction {logit.shape} != ground truth {g.shape}")
        p = _sigmoid(logit)
        lams.append(balance_weight(p, g))
        bces.append(weighted_bce(p, g, eps=eps, normalized=normalized))
        ious.append(iou_loss(p, g))
    return LossBreakdown(lams, bces, ious, float(sum(bces) + sum(ious)))


def total_loss_taped(tape, logits, g, eps: float = DEFAULT_EPS, normalized: bool = False, weights=None):
    """Same objective recorded on an autograd tape; returns ``(scalar Var, breakdown)``.

    ``weights`` optionally supplies one frozen balance map per level.
    """
    g = binarize(np.asarray(g, dtype=np.float64))
    terms, lams, bces, ious = [], [], [], []
    for level, logit in enumerate(logits):
        p = tape.sigmoid(logit)
        gl = g.astype(p.value.dtype)
        lam = balance_weight(p.value, gl) if weights is None else weights[level]
        bce = tape.weighted_bce(p, gl, eps=eps, normalized=normalized, weights=lam)
        iou = tape.iou_loss(p, gl)
        terms += [bce, iou]
        lams.append(lam)
        bces.append(float(bce.value))
        ious.append(float(iou.value))
    total = tape.add_scalars(*terms)
    return total, LossBreakdown(lams, bces, ious, float(total.value))
