"""Central finite-difference oracle shared by the gradient tests."""

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; f maps the (mutated) array to a float."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs deviation relative to the gradient's scale.

    ``floor`` keeps gradients that vanish identically (e.g. a bias feeding a
    batch norm) from being judged on finite-difference noise alone.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def brute_knn(p: np.ndarray, q: np.ndarray, k: int, exclude_self: bool = False):
    """Exhaustive all-pairs scan, ties by index."""
    rows = []
    for i, qi in enumerate(q):
        d2 = [(float(((pj - qi) ** 2).sum()), j) for j, pj in enumerate(p)
              if not (exclude_self and j == i)]
        d2.sort()
        rows.append([j for _, j in d2[:k]])
    return np.array(rows)
