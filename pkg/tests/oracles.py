"""Independent reference implementations used as test oracles."""
import itertools

import numpy as np


def all_monotone_paths(Ta, Tb):
    def rec(i, j):
        if (i, j) == (Ta - 1, Tb - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            ni, nj = i + di, j + dj
            if ni < Ta and nj < Tb:
                for tail in rec(ni, nj):
                    yield [(i, j)] + tail
    yield from rec(0, 0)


def brute_force_dtw(a, b):
    """Exhaustive minimum over every monotone path: (path, cost)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    best = None
    for path in all_monotone_paths(len(a), len(b)):
        cost = sum(float(np.linalg.norm(a[i] - b[j])) for i, j in path)
        if best is None or cost < best[1]:
            best = (path, cost)
    return best


def brute_force_mcd(a, b):
    path, cost = brute_force_dtw(a, b)
    return 10.0 / np.log(10.0) * np.sqrt(2.0) * cost / len(path)


def linear_resample(values, n_out):
    """Piecewise-linear interpolant of values on [0, 1] sampled at n_out uniform points."""
    values = np.asarray(values, dtype=np.float64)
    n_in = len(values)
    out = []
    for k in range(n_out):
        pos = k * (n_in - 1) / (n_out - 1) if n_out > 1 else 0.0
        lo = int(np.floor(pos))
        hi = min(lo + 1, n_in - 1)
        frac = pos - lo
        out.append(values[lo] * (1 - frac) + values[hi] * frac)
    return np.array(out)


def pairwise(iterable):
    return itertools.combinations(iterable, 2)
