"""Independent numerical oracles used by the test suite.

Everything here stays deliberately dumb: central finite differences and
brute-force set arithmetic, never the code paths under test.
"""

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(np.linalg.norm((a - b).ravel()) / denom)


def brute_force_jaccard(s1, s2) -> float:
    """Set overlap computed by explicit element counting, no set operators."""
    items1 = list(s1)
    items2 = list(s2)
    if not items1 and not items2:
        return 1.0
    inter = 0
    for x in items1:
        for y in items2:
            if x == y:
                inter += 1
                break
    union = len(items1)
    for y in items2:
        found = False
        for x in items1:
            if x == y:
                found = True
                break
        if not found:
            union += 1
    return inter / union
