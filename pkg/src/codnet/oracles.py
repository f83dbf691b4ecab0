"""Brute-force metric definitions for small maps.

Written directly from the metric definitions with nested lists and the
``math`` module only, so they share no code path with :mod:`codnet.metrics`.
Maps are lists of rows of floats; ground truth is thresholded at 0.5.
Intended for maps up to roughly 32x32.
"""
from __future__ import annotations

import math

EPS = 2.220446049250313e-16


def _binary(g):
    return [[1 if v >= 0.5 else 0 for v in row] for row in g]


def _mean(values):
    values = list(values)
    return sum(values) / len(values)


def _round_half_even(x):
    return int(round(x))  # Python's round() is half-to-even


def s_measure(p, g, alpha=0.5):
    g = _binary(g)
    h, w = len(g), len(g[0])
    flat_p = [v for row in p for v in row]
    flat_g = [v for row in g for v in row]
    fg_frac = sum(flat_g) / (h * w)
    if fg_frac == 0:
        return 1.0 - _mean(flat_p)
    if fg_frac == 1:
        return _mean(flat_p)

    def object_score(vals):
        mu = _mean(vals)
        if len(vals) > 1:
            sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / (len(vals) - 1))
        else:
            sd = 0.0
        return 2 * mu / (mu * mu + 1 + sd + EPS)

    fg_vals = [pv for pv, gv in zip(flat_p, flat_g) if gv == 1]
    bg_vals = [1 - pv for pv, gv in zip(flat_p, flat_g) if gv == 0]
    s_obj = fg_frac * object_score(fg_vals) + (1 - fg_frac) * object_score(bg_vals)

    ys = [y for y in range(h) for x in range(w) if g[y][x]]
    xs = [x for y in range(h) for x in range(w) if g[y][x]]
    cx = _round_half_even(sum(xs) / len(xs)) + 1
    cy = _round_half_even(sum(ys) / len(ys)) + 1

    def region_ssim(r0, r1, c0, c1):
        pv = [p[y][x] for y in range(r0, r1) for x in range(c0, c1)]
        gv = [g[y][x] for y in range(r0, r1) for x in range(c0, c1)]
        n = len(pv)
        if n == 0:
            return 0.0
        mx, my = _mean(pv), _mean(gv)
        d = max(n - 1, 1)
        sx = sum((a - mx) ** 2 for a in pv) / d
        sy = sum((b - my) ** 2 for b in gv) / d
        sxy = sum((a - mx) * (b - my) for a, b in zip(pv, gv)) / d
        num = 4 * mx * my * sxy
        den = (mx * mx + my * my) * (sx + sy)
        if num != 0:
            return num / (den + EPS)
        return 1.0 if den == 0 else 0.0

    area = h * w
    regions = [
        (cx * cy / area, (0, cy, 0, cx)),
        (cy * (w - cx) / area, (0, cy, cx, w)),
        ((h - cy) * cx / area, (cy, h, 0, cx)),
    ]
    regions.append((1 - sum(r[0] for r in regions), (cy, h, cx, w)))
    s_reg = sum(wt * region_ssim(*box) for wt, box in regions if wt > 0)
    s = alpha * s_obj + (1 - alpha) * s_reg
    return min(max(s, 0.0), 1.0)


def e_measure(p, g, n_thresholds=256, eps=EPS):
    g = _binary(g)
    h, w = len(g), len(g[0])
    n = h * w
    n_fg = sum(sum(row) for row in g)
    scores = []
    for k in range(n_thresholds):
        t = (k + 0.5) / n_thresholds
        fm = [[1.0 if p[y][x] >= t else 0.0 for x in range(w)] for y in range(h)]
        if n_fg == 0:
            score = sum(1.0 - fm[y][x] for y in range(h) for x in range(w)) / n
        elif n_fg == n:
            score = sum(fm[y][x] for y in range(h) for x in range(w)) / n
        else:
            mean_fm = sum(sum(row) for row in fm) / n
            mean_gt = n_fg / n
            total = 0.0
            for y in range(h):
                for x in range(w):
                    a = fm[y][x] - mean_fm
                    b = g[y][x] - mean_gt
                    xi = 2 * a * b / (a * a + b * b + eps)
                    total += (xi + 1) ** 2 / 4
            score = total / n
        scores.append(score)
    return sum(scores) / len(scores)


def _gaussian(size, sigma):
    half = (size - 1) / 2
    k = [
        [math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma)) for j in range(size)]
        for i in range(size)
    ]
    peak = max(max(row) for row in k)
    k = [[v if v >= EPS * peak else 0.0 for v in row] for row in k]
    total = sum(sum(row) for row in k)
    return [[v / total for v in row] for row in k]


def weighted_f_measure(p, g, beta_sq=0.3, sigma=5.0, size=7, decay=math.log(5) / 5):
    g = _binary(g)
    h, w = len(g), len(g[0])
    fg = [(y, x) for y in range(h) for x in range(w) if g[y][x]]
    if not fg:
        raise ValueError("empty ground truth")
    err = [[abs(p[y][x] - g[y][x]) for x in range(w)] for y in range(h)]

    dist = [[0.0] * w for _ in range(h)]
    err_t = [row[:] for row in err]
    for y in range(h):
        for x in range(w):
            if g[y][x]:
                continue
            best = min(((fy - y) ** 2 + (fx - x) ** 2, fy, fx) for fy, fx in fg)
            dist[y][x] = math.sqrt(best[0])
            err_t[y][x] = err[best[1]][best[2]]

    k = _gaussian(size, sigma)
    half = size // 2
    ea = [[0.0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            num = mass = 0.0
            for i in range(size):
                for j in range(size):
                    yy, xx = y + i - half, x + j - half
                    if 0 <= yy < h and 0 <= xx < w:
                        num += k[i][j] * err_t[yy][xx]
                        mass += k[i][j]
            ea[y][x] = num / mass

    ew_fg, ew_bg = [], []
    for y in range(h):
        for x in range(w):
            if g[y][x]:
                ew_fg.append(min(err[y][x], ea[y][x]))
            else:
                ew_bg.append(err[y][x] * (2.0 - math.exp(-decay * dist[y][x])))
    tpw = len(fg) - sum(ew_fg)
    fpw = sum(ew_bg)
    recall = 1 - sum(ew_fg) / len(ew_fg)
    precision = tpw / (tpw + fpw + EPS)
    return (1 + beta_sq) * recall * precision / (recall + beta_sq * precision + EPS)


def mae(p, g):
    g = _binary(g)
    vals = [abs(a - b) for pr, gr in zip(p, g) for a, b in zip(pr, gr)]
    return sum(vals) / len(vals)


def pr_point(p, g, t, beta_sq=0.3):
    """(precision, recall, F) of ``p >= t`` by direct counting."""
    g = _binary(g)
    tp = fp = fn = 0
    for pr, gr in zip(p, g):
        for a, b in zip(pr, gr):
            pos = a >= t
            tp += pos and b == 1
            fp += pos and b == 0
            fn += (not pos) and b == 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn)
    den = beta_sq * precision + recall
    f = (1 + beta_sq) * precision * recall / den if den else 0.0
    return precision, recall, f
