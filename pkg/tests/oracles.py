"""Naive reference implementations for tests. Nothing here imports segqa."""

import math
from fractions import Fraction


def mean(v):
    return math.fsum(v) / len(v)


def naive_plcc(x, y):
    mx, my = mean(x), mean(y)
    sxy = sxx = syy = 0.0
    for a, b in zip(x, y):
        sxy += (a - mx) * (b - my)
        sxx += (a - mx) ** 2
        syy += (b - my) ** 2
    return sxy / math.sqrt(sxx * syy)


def average_ranks(v):
    """1-based ranks; tied values share the mean of the positions they occupy."""
    ranks = [0.0] * len(v)
    for i, a in enumerate(v):
        less = sum(1 for b in v if b < a)
        equal = sum(1 for b in v if b == a)
        ranks[i] = less + (equal + 1) / 2.0
    return ranks


def naive_srocc(x, y):
    return naive_plcc(average_ranks(x), average_ranks(y))


def naive_krocc(x, y):
    n = len(x)
    p = q = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = (x[i] - x[j]) * (y[i] - y[j])
            if s > 0:
                p += 1
            elif s < 0:
                q += 1
    return 2.0 * (p - q) / (n * (n - 1))


def naive_rmse(x, y):
    return math.sqrt(math.fsum((a - b) ** 2 for a, b in zip(x, y)) / len(x))


def naive_cosine(a, b):
    dot = na = nb = 0.0
    for u, v in zip(a, b):
        dot += u * v
        na += u * u
        nb += v * v
    return dot / (math.sqrt(na) * math.sqrt(nb))


def pixel_oa(truth, pred):
    """Exact OA by counting matching pixels."""
    total = correct = 0
    for row_t, row_p in zip(truth, pred):
        for a, b in zip(row_t, row_p):
            total += 1
            correct += int(a == b)
    return Fraction(correct, total)


def grid_crops(width, height, p):
    """Every axis-aligned p x p window with corners on the p-grid that fits."""
    out = []
    y = 0
    while y + p <= height:
        x = 0
        while x + p <= width:
            out.append((x, y))
            x += p
        y += p
    return out


def central_diff(f, params, h=1e-5):
    """Central finite-difference gradient of scalar f w.r.t. each float64 tensor in params."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(f())
                flat[i] = orig - h
                fm = float(f())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-4):
    """max |a - n| / max(|a|, |n|, floor) over all entries.

    The floor keeps structurally zero gradients (e.g. attention key biases, which
    softmax ignores) from turning finite-difference roundoff into huge ratios.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        for u, v in zip(a.reshape(-1).tolist(), n.reshape(-1).tolist()):
            worst = max(worst, abs(u - v) / max(abs(u), abs(v), floor))
    return worst
