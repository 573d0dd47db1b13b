"""Brute-force reference for the projection onto the sparse box set."""

from itertools import combinations

import numpy as np


def brute_projection(y, x, lower, upper, eps0):
    """Minimum of ||y - z||^2 over z with at most eps0 rows differing from x, each row in [x+l, x+u].

    Enumerates every moved subset; returns (best objective, best z).
    """
    n = len(x)
    clamp = np.clip(y, x + lower, x + upper)
    best, best_z = np.inf, None
    for k in range(min(eps0, n) + 1):
        for subset in combinations(range(n), k):
            z = x.copy()
            z[list(subset)] = clamp[list(subset)]
            val = float(np.sum((y - z) ** 2))
            if val < best:
                best, best_z = val, z
    return best, best_z


def random_instance(r, n=None):
    n = int(r.integers(1, 9)) if n is None else n
    x = r.random((n, 2))
    lower = -r.random((n, 2)) * 0.2
    upper = r.random((n, 2)) * 0.2
    # some degenerate boxes, as for macros
    fixed = r.random(n) < 0.2
    lower[fixed] = 0.0
    upper[fixed] = 0.0
    y = x + r.normal(scale=0.2, size=(n, 2))
    eps0 = int(r.integers(0, n + 1))
    return y, x, lower, upper, eps0
