import numpy as np


def numeric_grad(f, arr, eps=1e-5):
    """Central finite differences of a scalar function w.r.t. an array."""
    arr = np.asarray(arr, dtype=np.float64)
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = f(arr)
        flat[i] = orig - eps
        lm = f(arr)
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * eps)
    return g


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
    return float((np.abs(a - n) / denom).max())
