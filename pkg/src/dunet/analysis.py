"""Numerical checks of edge enhancement/suppression and the smoothness diagnostic.

A unit step smoothed by a Gaussian of width sigma has the profile
u = Phi(x / sigma) with closed-form derivatives.  For a learned flux
``phi`` acting on the gradient, the rate of change of the edge strength is

    d/dt (u_x)_i = sum_j phi''_ij (u_xx)_j**2 + phi'_ij (u_xxx)_j

At the inflection point u_xx = 0 and u_xxx < 0, so the sign of phi'
alone decides whether channel i is sharpened (rate > 0) or smoothed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .diffcore import MLP, Linear, Tensor
from .du import DULayer, chain_stencil, du_stack
from .geom import knn

DEADBAND = 1e-9
FD_STEP = 1e-4


@dataclass(frozen=True)
class EdgeProfile:
    xs: np.ndarray
    u: np.ndarray  # (samples, channels)
    ux: np.ndarray
    uxx: np.ndarray
    uxxx: np.ndarray
    sigma: float

    @property
    def channels(self) -> int:
        return self.u.shape[1]

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])

    @property
    def inflection(self) -> int:
        return int(np.argmax(np.abs(self.ux[:, 0])))


def step_edge_profile(sigma: float, halfwidth: float, samples: int, amplitudes=None) -> EdgeProfile:
    """Gaussian-smoothed unit step on [-halfwidth, halfwidth], one column per channel."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if samples < 3 or samples % 2 == 0:
        raise ValueError("samples must be an odd integer >= 3")
    if not halfwidth > 0:
        raise ValueError("halfwidth must be positive")
    amp = np.ones(1) if amplitudes is None else np.asarray(amplitudes, dtype=np.float64).reshape(-1)
    xs = np.linspace(-halfwidth, halfwidth, samples)
    xs[samples // 2] = 0.0
    z = (xs / sigma)[:, None]
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return EdgeProfile(
        xs=xs,
        u=ndtr(z) * amp,
        ux=pdf / sigma * amp,
        uxx=-z * pdf / sigma**2 * amp,
        uxxx=(z * z - 1) * pdf / sigma**3 * amp,
        sigma=float(sigma),
    )


def as_phi(phi):
    """Normalize a flux specification to a diffcore MLP.

    Accepts a scalar or square matrix (linear map x -> W x), a Linear, an MLP
    or a DULayer (its phi is used).
    """
    if isinstance(phi, DULayer):
        if phi.phi is None:
            raise ValueError("DU layer has no phi")
        return phi.phi
    if isinstance(phi, MLP):
        return phi
    if isinstance(phi, Linear):
        m = MLP.__new__(MLP)
        m.layers = [phi]
        return m
    w = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("a linear phi needs a square weight matrix")
    m = MLP([w.shape[0], w.shape[0]], None)
    m.layers[0].weight.data = w.T.copy()
    return m


def _evaluator(phi):
    if callable(phi) and not isinstance(phi, (MLP, Linear, DULayer)):
        return phi
    return as_phi(phi).numpy


def phi_derivatives(phi, g: np.ndarray, h: float = FD_STEP):
    """Central-difference Jacobian J[s, i, j] and diagonal curvature H[s, i, j] at rows of g.

    Second differences that are indistinguishable from rounding noise are
    reported as exactly zero.
    """
    f = _evaluator(phi)
    g = np.asarray(g, dtype=np.float64)
    m, d = g.shape
    f0 = f(g)
    if f0.shape != (m, d):
        raise ValueError(f"phi maps {d} channels to {f0.shape[1:]}, expected ({d},)")
    jac = np.empty((m, d, d))
    curv = np.empty((m, d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fp, fm = f(g + e), f(g - e)
        jac[:, :, j] = (fp - fm) / (2 * h)
        num = fp - 2 * f0 + fm
        noise = 64 * np.finfo(float).eps * (np.abs(fp) + 2 * np.abs(f0) + np.abs(fm))
        curv[:, :, j] = np.where(np.abs(num) <= noise, 0.0, num / (h * h))
    return jac, curv


def edge_change_terms(phi, profile: EdgeProfile, h: float = FD_STEP):
    """(curvature term, slope term) of the edge rate, each (samples, channels)."""
    jac, curv = phi_derivatives(phi, profile.ux, h)
    first = np.einsum("sij,sj->si", curv, profile.uxx**2)
    second = np.einsum("sij,sj->si", jac, profile.uxxx)
    return first, second


def edge_change_rate(phi, profile: EdgeProfile, channel: int | None = None, h: float = FD_STEP):
    first, second = edge_change_terms(phi, profile, h)
    rate = first + second
    if channel is None:
        return rate
    if not 0 <= channel < rate.shape[1]:
        raise ValueError(f"channel {channel} out of range")
    return rate[:, channel]


def classify_rate(rate, deadband: float = DEADBAND):
    rate = np.asarray(rate)
    return np.where(rate > deadband, "enhance", np.where(rate < -deadband, "suppress", "neutral"))


def _central_slope(u: np.ndarray, c: int, dx: float) -> np.ndarray:
    return (u[c + 1] - u[c - 1]) / (2 * dx)


def discrete_edge_change(phi, profile: EdgeProfile, steps: int = 1) -> np.ndarray:
    """Change of |u_x| at the inflection point after explicit DU steps on a 1-D chain."""
    mlp = as_phi(phi)
    layer = DULayer(profile.channels, k=2, use_varphi=False, average=False, phi_hidden=[])
    layer.phi = mlp
    c = profile.inflection
    before = np.abs(_central_slope(profile.u, c, profile.dx))
    out = du_stack(layer, Tensor(profile.u), chain_stencil(len(profile.xs)), steps)
    after = np.abs(_central_slope(out.data, c, profile.dx))
    return after - before


@dataclass(frozen=True)
class EdgeBehavior:
    labels: list
    rates: np.ndarray  # analytic rate at the inflection point, per channel
    discrete_delta: np.ndarray  # one-step change of |u_x(0)|, per channel

    @property
    def agrees(self) -> np.ndarray:
        expected = np.sign(self.rates) * (np.abs(self.rates) >= DEADBAND)
        return np.sign(self.discrete_delta) == expected


def classify_edge_behavior(phi, profile: EdgeProfile, deadband: float = DEADBAND,
                           cross_check: bool = True) -> EdgeBehavior:
    rate = edge_change_rate(phi, profile)[profile.inflection]
    labels = classify_rate(rate, deadband).tolist()
    if cross_check:
        delta = discrete_edge_change(phi, profile)
    else:
        delta = np.full(rate.shape, np.nan)
    return EdgeBehavior(labels, rate, delta)


@dataclass(frozen=True)
class DiffusivityFn:
    kind: str = "constant"
    lam: float = 1.0
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "perona_malik"):
            raise ValueError(f"unknown diffusivity {self.kind!r}")
        if self.kind == "constant" and not self.value > 0:
            raise ValueError("constant diffusivity must be positive")
        if self.kind == "perona_malik" and not self.lam > 0:
            raise ValueError("contrast parameter must be positive")

    def __call__(self, grad: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full(np.shape(grad), self.value)
        return 1.0 / (1.0 + (np.asarray(grad) / self.lam) ** 2)

    @property
    def max_value(self) -> float:
        return self.value if self.kind == "constant" else 1.0


def stable_dt(g: DiffusivityFn, dx: float = 1.0) -> float:
    return dx * dx / (2.0 * g.max_value)


def diffuse_reference_1d(u0, g: DiffusivityFn, dt: float, steps: int, dx: float = 1.0) -> np.ndarray:
    """Explicit flux-form scheme for u_t = (g u_x)_x with zero flux at both ends."""
    bound = stable_dt(g, dx)
    if not 0 < dt <= bound:
        raise ValueError(f"unstable time step: dt={dt} exceeds bound {bound}")
    u = np.array(u0, dtype=np.float64)
    flux = np.zeros(u.size + 1)
    for _ in range(steps):
        grad = np.diff(u) / dx
        flux[1:-1] = g(grad) * grad
        u = u + dt * np.diff(flux) / dx
    return u


def local_smoothness(f, nbr, mode: str = "aggregate") -> np.ndarray:
    """Per-point norm of the summed neighbor differences.

    ``mode="sum_of_norms"`` instead sums the norms of individual differences.
    """
    f = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    idx = np.asarray(getattr(nbr, "indices", nbr))
    if f.ndim == 1:
        f = f[:, None]
    if idx.size and (idx.min() < 0 or idx.max() >= f.shape[0]):
        raise IndexError("neighbor index out of range")
    diff = f[idx] - f[:, None, :]
    if mode == "aggregate":
        return np.linalg.norm(diff.sum(1), axis=1)
    if mode == "sum_of_norms":
        return np.linalg.norm(diff, axis=2).sum(1)
    raise ValueError(f"unknown smoothness mode {mode!r}")


def smoothness_delta(before, after, nbr, mode: str = "aggregate") -> np.ndarray:
    """Positive where the operator made a point stand out more from its neighbors."""
    b = before.data if isinstance(before, Tensor) else np.asarray(before)
    a = after.data if isinstance(after, Tensor) else np.asarray(after)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {b.shape} vs {a.shape}")
    return local_smoothness(a, nbr, mode) - local_smoothness(b, nbr, mode)


def boundary_band(positions: np.ndarray, labels: np.ndarray, width: float = 2.0) -> np.ndarray:
    """Mask of points within ``width`` median nearest-neighbor spacings of another label."""
    positions = np.asarray(positions, dtype=np.float64)
    labels = np.asarray(labels)
    spacing = float(np.median(knn(positions, k=1).distances[:, 0]))
    band = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        inside, outside = labels == c, labels != c
        if not outside.any():
            continue
        d = knn(positions[outside], positions[inside], k=1).distances[:, 0]
        band[inside] = d <= width * spacing
    return band
