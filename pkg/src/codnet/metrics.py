"""Camouflaged/salient object detection metrics.

All functions take a prediction map ``p`` with values in [0, 1] and a
ground-truth map ``g`` (binarized at 0.5), as 2-D arrays or with leading
singleton axes. Constants follow the reference definitions of the
structure measure, enhanced-alignment measure and weighted F-measure;
see :class:`MetricParams`.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

EPS = np.spacing(1.0)  # 2.22e-16, the reference implementations' `eps`


class EmptyGroundTruth(ValueError):
    """Raised by metrics that are undefined when the mask has no foreground."""


@dataclass(frozen=True)
class MetricParams:
    alpha: float = 0.5
    beta_sq: float = 0.3
    n_thresholds: int = 256
    e_eps: float = EPS
    fw_sigma: float = 5.0
    fw_window: int = 7
    fw_decay: float = math.log(5) / 5  # importance 2 - exp(-decay * distance) outside the mask

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta_sq <= 0:
            raise ValueError("beta_sq must be positive")

    def thresholds(self) -> np.ndarray:
        """Bin centres (k + 0.5)/n, k = 0..n-1: evenly spaced, strictly inside (0, 1)."""
        return (np.arange(self.n_thresholds) + 0.5) / self.n_thresholds


@dataclass
class MetricReport:
    s_alpha: float
    e_phi: float
    f_beta_w: float
    mae: float


@dataclass
class SMeasureBreakdown:
    s_object: float
    s_region: float
    s_alpha: float


@dataclass
class EMeasureIntermediate:
    pred_centered: np.ndarray
    gt_centered: np.ndarray
    alignment: np.ndarray  # xi
    enhanced: np.ndarray  # phi, in [0, 1]


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_measure: np.ndarray


# -- input handling -------------------------------------------------------------


def _as_map(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    while x.ndim > 2 and x.shape[0] == 1:  # (1, 1, H, W) and friends
        x = x[0]
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {np.shape(x)}")
    return x


def normalize_prediction(p) -> np.ndarray:
    """Min-max rescale only when values fall outside [0, 1]."""
    p = _as_map(p)
    lo, hi = p.min(), p.max()
    if lo >= 0 and hi <= 1:
        return p
    if hi == lo:
        return np.zeros_like(p)
    return (p - lo) / (hi - lo)


def prepare(p, g):
    p = normalize_prediction(p)
    g = _as_map(g)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    return p, g >= 0.5


# -- MAE -----------------------------------------------------------------------


def mae(p, g) -> float:
    p, g = prepare(p, g)
    return float(np.mean(np.abs(p - g)))


# -- S-measure -----------------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    mu = values.mean()
    sd = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sd + EPS)


def _s_object(p, g) -> float:
    u = g.mean()
    return u * _object_score(p[g]) + (1 - u) * _object_score(1 - p[~g])


def _centroid(g):
    h, w = g.shape
    if not g.any():
        return int(np.round(w / 2)), int(np.round(h / 2))
    rows, cols = np.nonzero(g)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _ssim(p, g) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    denom = max(n - 1, 1)
    sx = np.sum((p - x) ** 2) / denom
    sy = np.sum((g - y) ** 2) / denom
    sxy = np.sum((p - x) * (g - y)) / denom
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + EPS))
    return 1.0 if b == 0 else 0.0


def _s_region(p, g) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    gf = g.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = y * (w - x) / area
    w3 = (h - y) * x / area
    w4 = 1 - w1 - w2 - w3
    quads = [
        (w1, slice(0, y), slice(0, x)),
        (w2, slice(0, y), slice(x, w)),
        (w3, slice(y, h), slice(0, x)),
        (w4, slice(y, h), slice(x, w)),
    ]
    return float(sum(wq * _ssim(p[r, c], gf[r, c]) for wq, r, c in quads if wq > 0))


def s_measure(p, g, params: MetricParams = MetricParams()) -> SMeasureBreakdown:
    p, g = prepare(p, g)
    fg = g.mean()
    if fg == 0:
        s = 1.0 - p.mean()
        return SMeasureBreakdown(s, s, float(s))
    if fg == 1:
        s = p.mean()
        return SMeasureBreakdown(s, s, float(s))
    so = _s_object(p, g)
    sr = _s_region(p, g)
    s = params.alpha * so + (1 - params.alpha) * sr
    return SMeasureBreakdown(float(so), float(sr), float(min(max(s, 0.0), 1.0)))


# -- E-measure -----------------------------------------------------------------


def alignment_maps(binary_pred, g, eps: float = EPS) -> EMeasureIntermediate:
    """Bias-removed maps, alignment xi and enhanced alignment phi for one binary map."""
    fp = _as_map(binary_pred)
    fg = _as_map(g)
    dp = fp - fp.mean()
    dg = fg - fg.mean()
    xi = 2 * dg * dp / (dg * dg + dp * dp + eps)
    return EMeasureIntermediate(dp, dg, xi, (xi + 1) ** 2 / 4)


def _counts_at(p, g, thresholds):
    """(TP, FP) counts of ``p >= t`` for every threshold, via sorted search."""
    fg = np.sort(p[g])
    bg = np.sort(p[~g])
    tp = fg.size - np.searchsorted(fg, thresholds, side="left")
    fp = bg.size - np.searchsorted(bg, thresholds, side="left")
    return tp, fp


def e_measure_curve(p, g, params: MetricParams = MetricParams()) -> np.ndarray:
    """Enhanced-alignment score of ``p >= t`` for each threshold."""
    p, g = prepare(p, g)
    n = p.size
    thresholds = params.thresholds()
    tp, fp = _counts_at(p, g, thresholds)
    n_fg = int(g.sum())
    if n_fg == 0:
        return 1.0 - fp / n
    if n_fg == n:
        return tp / n
    fn = n_fg - tp
    tn = n - n_fg - fp
    mean_p = (tp + fp) / n
    mean_g = n_fg / n
    scores = np.zeros(len(thresholds))
    # A binary pair takes only four (pred, gt) combinations.
    for pred_val, gt_val, count in ((1, 1, tp), (1, 0, fp), (0, 1, fn), (0, 0, tn)):
        dp = pred_val - mean_p
        dg = gt_val - mean_g
        xi = 2 * dg * dp / (dg * dg + dp * dp + params.e_eps)
        scores += count * (xi + 1) ** 2 / 4
    return scores / n


def e_measure(p, g, params: MetricParams = MetricParams()) -> float:
    """Mean E-measure over ``params.n_thresholds`` thresholds."""
    return float(np.mean(e_measure_curve(p, g, params)))


# -- weighted F-measure --------------------------------------------------------


def nearest_foreground(g):
    """Euclidean distance to, and coordinates of, the nearest True pixel.

    Ties go to the lexicographically smallest (row, col), which keeps the
    result independent of the traversal order.
    """
    g = np.asarray(g, dtype=bool)
    h, w = g.shape
    if not g.any():
        raise EmptyGroundTruth("no foreground pixels")
    rows = np.arange(h)[:, None]
    big = h + w + 1
    above = np.maximum.accumulate(np.where(g, rows, -big), axis=0)
    below = np.flip(np.minimum.accumulate(np.flip(np.where(g, rows, 2 * big), 0), axis=0), 0)
    use_above = (rows - above) <= (below - rows)
    col_row = np.where(use_above, above, below)
    has_fg = g.any(axis=0)[None, :]
    dv2 = np.where(has_fg, (col_row - rows) ** 2, h * h + w * w + 1).astype(np.int64)
    col_row = np.where(has_fg, col_row, 0).astype(np.int64)

    xs = np.arange(w)
    dx2 = (xs[:, None] - xs[None, :]) ** 2  # [x, x']
    dist2 = np.empty((h, w), dtype=np.int64)
    near_r = np.empty((h, w), dtype=np.int64)
    near_c = np.empty((h, w), dtype=np.int64)
    stride = h * w
    for y in range(h):
        d2 = dv2[y][None, :] + dx2
        key = d2 * stride + col_row[y][None, :] * w + xs[None, :]
        best = np.argmin(key, axis=1)
        dist2[y] = d2[xs, best]
        near_r[y] = col_row[y, best]
        near_c[y] = best
    return np.sqrt(dist2), near_r, near_c


def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = (size - 1) / 2
    ax = np.arange(size) - half
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma * sigma))
    k[k < EPS * k.max()] = 0
    return k / k.sum()


def _border_normalized_filter(x, kernel):
    # Zero-padded correlation divided by the kernel mass inside the image.
    num = ndimage.correlate(x, kernel, mode="constant", cval=0.0)
    den = ndimage.correlate(np.ones_like(x), kernel, mode="constant", cval=0.0)
    return num / den


def weighted_f_measure(p, g, params: MetricParams = MetricParams()) -> float:
    p, g = prepare(p, g)
    if not g.any():
        raise EmptyGroundTruth("weighted F-measure is undefined for an empty ground truth")
    err = np.abs(p - g)
    dist, near_r, near_c = nearest_foreground(g)
    err_t = np.where(g, err, err[near_r, near_c])
    ea = _border_normalized_filter(err_t, gaussian_kernel(params.fw_window, params.fw_sigma))
    min_e = np.where(g & (ea < err), ea, err)
    importance = np.where(g, 1.0, 2.0 - np.exp(-params.fw_decay * dist))
    ew = min_e * importance
    tpw = g.sum() - ew[g].sum()
    fpw = ew[~g].sum()
    recall = 1 - ew[g].mean()
    precision = tpw / (tpw + fpw + EPS)
    b2 = params.beta_sq
    return float((1 + b2) * recall * precision / (recall + b2 * precision + EPS))


# -- PR / F curves ------------------------------------------------------------


def pr_curve(p, g, params: MetricParams = MetricParams(), thresholds=None) -> PrCurve:
    """Precision, recall and F-measure of ``p >= t`` per threshold.

    Precision is 1.0 at thresholds where nothing is predicted positive.
    """
    p, g = prepare(p, g)
    n_fg = int(g.sum())
    if n_fg == 0:
        raise EmptyGroundTruth("PR curve is undefined for an empty ground truth")
    t = params.thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    tp, fp = _counts_at(p, g, t)
    predicted = tp + fp
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_fg
    b2 = params.beta_sq
    denom = b2 * precision + recall
    f = np.where(denom > 0, (1 + b2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return PrCurve(t, precision, recall, f)


def mean_curve(curves) -> PrCurve:
    curves = list(curves)
    if not curves:
        raise ValueError("no curves to average")
    stack = lambda attr: np.mean([getattr(c, attr) for c in curves], axis=0)  # noqa: E731
    return PrCurve(curves[0].thresholds, stack("precision"), stack("recall"), stack("f_measure"))


# -- dataset evaluation ------------------------------------------------------

ALL_METRICS = ("s", "e", "fw", "mae")


@dataclass
class ImageRow:
    image: str
    s_alpha: float | None = None
    e_phi: float | None = None
    f_beta_w: float | None = None
    mae: float | None = None
    skipped: bool = False


@dataclass
class DatasetReport:
    rows: list
    aggregate: MetricReport
    skipped: list = field(default_factory=list)
    params: MetricParams = field(default_factory=MetricParams)
    metrics: tuple = ALL_METRICS

    def as_dict(self):
        return {
            "params": asdict(self.params),
            "metrics": list(self.metrics),
            "rows": [asdict(r) for r in self.rows],
            "aggregate": asdict(self.aggregate),
            "skipped": list(self.skipped),
        }


def evaluate_pair(name, p, g, params: MetricParams = MetricParams(), metrics=ALL_METRICS) -> ImageRow:
    row = ImageRow(name)
    p, g = prepare(p, g)
    if not g.any():
        # Weighted F is undefined here; the image is left out of every mean.
        row.skipped = True
    if "s" in metrics:
        row.s_alpha = s_measure(p, g, params).s_alpha
    if "e" in metrics:
        row.e_phi = e_measure(p, g, params)
    if "mae" in metrics:
        row.mae = mae(p, g)
    if "fw" in metrics and not row.skipped:
        row.f_beta_w = weighted_f_measure(p, g, params)
    return row


def _mean(values):
    values = list(values)
    return math.fsum(values) / len(values) if values else float("nan")


def evaluate_dataset(pairs, params: MetricParams = MetricParams(), metrics=ALL_METRICS, threads: int = 1):
    """Per-image metrics plus arithmetic means over the non-skipped images.

    ``pairs`` holds ``(name, prediction, ground_truth)`` triples; rows are
    ordered by name regardless of input order. Images whose metrics are
    undefined (empty ground truth) are listed in ``skipped`` and left out
    of every mean.
    """
    pairs = sorted(pairs, key=lambda item: item[0])
    if not pairs:
        raise ValueError("no image pairs to evaluate")
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    metrics = tuple(m for m in ALL_METRICS if m in set(metrics))

    def job(item):
        return evaluate_pair(*item, params=params, metrics=metrics)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(job, pairs))
    else:
        rows = [job(item) for item in pairs]
    valid = [r for r in rows if not r.skipped]
    if not valid:
        raise ValueError("every image pair was skipped; nothing to aggregate")

    def agg(attr, key):
        return _mean(getattr(r, attr) for r in valid) if key in metrics else None

    aggregate = MetricReport(
        s_alpha=agg("s_alpha", "s"),
        e_phi=agg("e_phi", "e"),
        f_beta_w=agg("f_beta_w", "fw"),
        mae=agg("mae", "mae"),
    )
    return DatasetReport(rows, aggregate, [r.image for r in rows if r.skipped], params, metrics)


def dataset_curve(pairs, params: MetricParams = MetricParams()):
    """Mean PR/F curve over pairs with non-empty ground truth; returns (curve, skipped names)."""
    curves, skipped = [], []
    for name, p, g in sorted(pairs, key=lambda item: item[0]):
        try:
            curves.append(pr_curve(p, g, params))
        except EmptyGroundTruth:
            skipped.append(name)
    if not curves:
        raise ValueError("no image pair has a non-empty ground truth")
    return mean_curve(curves), skipped
