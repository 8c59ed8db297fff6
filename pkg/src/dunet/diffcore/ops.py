"""Differentiable kernels.

Shapes are checked exactly; there is no implicit broadcasting beyond adding
a bias vector.  Reductions that feed values forward (neighbor means, batch
statistics) sum in sorted order so their results do not depend on the order
of the reduced axis.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, accumulate, as_tensor, make

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _indices(nbr) -> np.ndarray:
    return np.asarray(getattr(nbr, "indices", nbr), dtype=np.int64)


def ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum that is bit-identical under any permutation along ``axis``."""
    return np.sort(x, axis=axis).sum(axis=axis)


def scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[m] = sum of values[r] over all r with idx[r] == m."""
    idx = idx.reshape(-1)
    values = values.reshape(idx.size, -1)
    a = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
    return np.asarray(a @ values)


def _check_index(idx: np.ndarray, n: int, op: str):
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: neighbor index out of range for {n} points")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x W + b on the last axis; leading axes are flattened."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: x {x.shape} incompatible with W {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear: bias {b.shape} != ({w.shape[1]},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        accumulate(x, (g2 @ w.data.T).reshape(x.shape))
        accumulate(w, x2.T @ g2)
        if b is not None:
            accumulate(b, g2.sum(0))

    return make(y.reshape(lead + (w.shape[1],)), parents, backward, "linear")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 1.

    A zero-initialized residual branch (phi output 0, batch norm shift 0)
    sits exactly at the kink, and a zero subgradient there would keep it at
    zero forever.
    """
    grad_mask = x.data >= 0

    def backward(g):
        accumulate(x, g * grad_mask)

    return make(np.where(x.data > 0, x.data, 0.0), (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return make(a.data + b.data, (a, b), backward, "add")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, gi in zip(xs, np.split(g, splits, axis=axis)):
            accumulate(x, gi)

    return make(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    _check_index(idx, x.shape[0], "take_rows")
    n = x.shape[0]

    def backward(g):
        accumulate(x, scatter_rows(idx, g, n).reshape(x.shape))

    return make(x.data[idx], (x,), backward, "take_rows")


def gather_feat(u: Tensor, nbr) -> Tensor:
    """out[s, j] = u[nbr[s, j]]."""
    idx = _indices(nbr)
    n = u.shape[0]
    _check_index(idx, n, "gather_feat")

    def backward(g):
        accumulate(u, scatter_rows(idx, g, n).reshape(u.shape))

    return make(u.data[idx], (u,), backward, "gather_feat")


def gather_diff(u: Tensor, nbr) -> Tensor:
    """out[s, j] = u[nbr[s, j]] - u[s]."""
    idx = _indices(nbr)
    n = u.shape[0]
    _check_index(idx, n, "gather_diff")
    if idx.shape[0] != n:
        raise ValueError(f"gather_diff: {idx.shape[0]} neighbor rows for {n} points")

    def backward(g):
        accumulate(u, scatter_rows(idx, g, n).reshape(u.shape) - g.sum(1))

    return make(u.data[idx] - u.data[:, None, :], (u,), backward, "gather_diff")


def mean_over_neighbors(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ValueError("mean_over_neighbors expects (n, k, d)")
    k = x.shape[1]
    if k == 0:
        raise ValueError("mean_over_neighbors: k must be >= 1")

    def backward(g):
        accumulate(x, np.broadcast_to(g[:, None, :] / k, x.shape))

    return make(ordered_sum(x.data, 1) / k, (x,), backward, "mean_over_neighbors")


def sum_over_neighbors(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError("sum_over_neighbors expects (n, k>=1, d)")

    def backward(g):
        accumulate(x, np.broadcast_to(g[:, None, :], x.shape))

    return make(ordered_sum(x.data, 1), (x,), backward, "sum_over_neighbors")


def max_over_neighbors(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError("max_over_neighbors expects (n, k>=1, d)")
    arg = x.data.argmax(1)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
        accumulate(x, gx)

    return make(x.data.max(1), (x,), backward, "max_over_neighbors")


def interpolate(x: Tensor, nbr, weights) -> Tensor:
    """out[i] = sum_j weights[i, j] * x[nbr[i, j]]."""
    idx = _indices(nbr)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != idx.shape:
        raise ValueError("interpolate: weights must match neighbor index shape")
    n = x.shape[0]
    _check_index(idx, n, "interpolate")

    def backward(g):
        accumulate(x, scatter_rows(idx, w[:, :, None] * g[:, None, :], n))

    out = (w[:, :, None] * x.data[idx]).sum(1)
    return make(out, (x,), backward, "interpolate")


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, d: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, training: bool, state: BatchNormState) -> Tensor:
    """Per-channel normalization over the point axis (axis 0)."""
    if x.ndim != 2:
        raise ValueError("batch_norm expects (n, d)")
    n, d = x.shape
    if d == 0:
        raise ValueError("batch_norm: zero channels")
    if n == 0:
        raise ValueError("batch_norm: empty batch")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError("batch_norm: gamma/beta must have shape (d,)")
    eps = state.eps
    if training:
        mean = ordered_sum(x.data, 0) / n
        xc = x.data - mean
        var = ordered_sum(xc * xc, 0) / n
        m = state.momentum
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * unbiased
    else:
        xc = x.data - state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = gamma.data * xhat + beta.data

    def backward(g):
        accumulate(gamma, (g * xhat).sum(0))
        accumulate(beta, g.sum(0))
        gxhat = g * gamma.data
        if training:
            gx = inv_std * (gxhat - gxhat.mean(0) - xhat * (gxhat * xhat).mean(0))
        else:
            gx = gxhat * inv_std
        accumulate(x, gx)

    return make(y, (x, gamma, beta), backward, "batch_norm")


def cross_entropy_label_smoothing(logits: Tensor, labels, alpha: float = 0.0) -> Tensor:
    """Mean over points of -sum_c q_c log softmax(logits)_c, q = (1-a) onehot + a/C."""
    if logits.ndim != 2:
        raise ValueError("logits must be (n, C)")
    n, c = logits.shape
    if not 0.0 <= alpha < 1.0:
        raise ValueError("smoothing must satisfy 0 <= alpha < 1")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError("labels must be (n,)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits.data - logits.data.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    q = np.full((n, c), alpha / c)
    q[np.arange(n), labels] += 1.0 - alpha
    loss = -(q * logp).sum() / n

    def backward(g):
        accumulate(logits, g * (np.exp(logp) - q) / n)

    return make(np.asarray(loss), (logits,), backward, "cross_entropy")


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Scalar sum(x * weights); a convenient probe for gradient checks."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError("weighted_sum: weights must match x")

    def backward(g):
        accumulate(x, g * w)

    return make(np.asarray((x.data * w).sum()), (x,), backward, "weighted_sum")
