"""Independent pure-Python reference computations used by the tests."""

import math


def gram(feature):
    """feature: nested lists [C][H][W] -> [C][C] inner products by explicit loops."""
    c = len(feature)
    flat = [[v for row in ch for v in row] for ch in feature]
    return [[sum(a * b for a, b in zip(flat[i], flat[j])) for j in range(c)] for i in range(c)]


def strict_upper(m):
    n = len(m)
    return [m[i][j] for i in range(n) for j in range(n) if i < j]


def silhouette(points, labels):
    def dist(a, b):
        return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))

    n = len(points)
    total = 0.0
    for i in range(n):
        same = [dist(points[i], points[j]) for j in range(n) if j != i and labels[j] == labels[i]]
        if not same:
            continue
        a = sum(same) / len(same)
        b = min(
            sum(dist(points[i], points[j]) for j in range(n) if labels[j] == other)
            / sum(1 for j in range(n) if labels[j] == other)
            for other in set(labels) if other != labels[i]
        )
        total += (b - a) / max(a, b)
    return total / n


def mean_abs(a, b):
    fa = _flatten(a)
    fb = _flatten(b)
    return sum(abs(x - y) for x, y in zip(fa, fb)) / len(fa)


def _flatten(x):
    if isinstance(x, (list, tuple)):
        return [v for item in x for v in _flatten(item)]
    return [float(x)]


def lsgan(real, fake):
    r, f = _flatten(real), _flatten(fake)
    loss_d = sum((v - 1) ** 2 for v in r) / len(r) + sum(v * v for v in f) / len(f)
    loss_g = sum((v - 1) ** 2 for v in f) / len(f)
    return loss_d, loss_g


def vanilla(real, fake):
    def log_sig(z):
        return -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))

    r, f = _flatten(real), _flatten(fake)
    loss_d = -sum(log_sig(v) for v in r) / len(r) - sum(log_sig(-v) for v in f) / len(f)
    loss_g = -sum(log_sig(v) for v in f) / len(f)
    return loss_d, loss_g
