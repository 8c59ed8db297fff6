"""The Diffusion Unit: a learned explicit diffusion step on a point neighborhood.

One step updates every point feature as

    u_s <- u_s + varphi( mean_{n in N_s} phi(u_n - u_s) )

where ``phi`` is a shared MLP acting on the edge feature and ``varphi`` is
ReLU after batch normalization.  Switches reproduce the eight ablation rows
(edge feature, removing ``phi`` and/or ``varphi``, neighborhood size); with
``average=False`` the neighbor mean becomes the plain sum of the raw scheme.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import MLP, BatchNorm, Module, Tensor, ops

EDGE_FEATURES = ("difference", "neighbor")


@dataclass(frozen=True)
class DUAblationConfig:
    model_id: int
    k: int
    edge_feature: str
    use_phi: bool
    use_varphi: bool

    def as_dict(self):
        return asdict(self)


# rows of the DU ablation table; model 1 is the default design
ABLATION_TABLE = {
    1: DUAblationConfig(1, 16, "difference", True, True),
    2: DUAblationConfig(2, 16, "difference", False, True),
    3: DUAblationConfig(3, 16, "difference", True, False),
    4: DUAblationConfig(4, 16, "difference", False, False),
    5: DUAblationConfig(5, 8, "difference", True, True),
    6: DUAblationConfig(6, 24, "difference", True, True),
    7: DUAblationConfig(7, 28, "difference", True, True),
    8: DUAblationConfig(8, 16, "neighbor", True, True),
}


class DULayer(Module):
    """Parameters and switches of one Diffusion Unit.

    ``phi`` maps R^d -> R^d through ``phi_hidden`` hidden widths (default one
    hidden layer of width d).  Its last linear layer starts at zero so that
    a fresh layer is the identity map.
    """

    def __init__(self, d: int, k: int = 16, edge_feature: str = "difference",
                 use_phi: bool = True, use_varphi: bool = True, average: bool = True,
                 phi_hidden=None, rng: np.random.Generator | None = None,
                 zero_init: bool = True):
        if d < 1:
            raise ValueError("feature width must be positive")
        if k < 1:
            raise ValueError("neighborhood size must be positive")
        if edge_feature not in EDGE_FEATURES:
            raise ValueError(f"edge_feature must be one of {EDGE_FEATURES}")
        self.d = d
        self.k = k
        self.edge_feature = edge_feature
        self.use_phi = use_phi
        self.use_varphi = use_varphi
        self.average = average
        hidden = [d] if phi_hidden is None else list(phi_hidden)
        if rng is None:
            rng = np.random.default_rng(0)
        self.phi = MLP([d, *hidden, d], rng, zero_last=zero_init) if use_phi else None
        self.varphi = BatchNorm(d) if use_varphi else None

    def config(self) -> dict:
        return {"d": self.d, "k": self.k, "edge_feature": self.edge_feature,
                "use_phi": self.use_phi, "use_varphi": self.use_varphi, "average": self.average}

    def __call__(self, u: Tensor, nbr) -> Tensor:
        return du_forward(self, u, nbr)


def du_forward(layer: DULayer, u: Tensor, nbr) -> Tensor:
    if u.ndim != 2 or u.shape[1] != layer.d:
        raise ValueError(f"DU expects (n, {layer.d}) features, got {u.shape}")
    if not np.isfinite(u.data).all():
        raise ValueError("DU input contains non-finite values")
    n = u.shape[0]
    k = nbr.k if hasattr(nbr, "k") else np.shape(nbr)[1]
    clamped = layer.k > n - 1 and k == n - 1
    if k != layer.k and not clamped:
        raise ValueError(f"neighborhood size mismatch: layer k={layer.k}, index k={k}")

    if layer.edge_feature == "difference":
        edge = ops.gather_diff(u, nbr)
    else:
        edge = ops.gather_feat(u, nbr)
    if layer.phi is not None:
        edge = layer.phi(edge)
    agg = ops.mean_over_neighbors(edge) if layer.average else ops.sum_over_neighbors(edge)
    if layer.varphi is not None:
        agg = ops.relu(layer.varphi(agg))
    return ops.add(u, agg)


def du_ablation(config, d: int, rng: np.random.Generator | None = None, **kwargs) -> DULayer:
    """Layer with the switch settings of an ablation row (id or config)."""
    if not isinstance(config, DUAblationConfig):
        if config not in ABLATION_TABLE:
            raise ValueError(f"unknown ablation model id {config!r}; expected 1..8")
        config = ABLATION_TABLE[config]
    return DULayer(d, k=config.k, edge_feature=config.edge_feature, use_phi=config.use_phi,
                   use_varphi=config.use_varphi, rng=rng, **kwargs)


def du_stack(layers, u: Tensor, nbr, iterations: int) -> Tensor:
    """Iterate the explicit scheme; one layer is shared, otherwise one per iteration."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    layers = [layers] if isinstance(layers, DULayer) else list(layers)
    if len(layers) not in (1, iterations):
        raise ValueError(f"{len(layers)} layers cannot drive {iterations} iterations")
    for t in range(iterations):
        u = du_forward(layers[0] if len(layers) == 1 else layers[t], u, nbr)
    return u


def chain_stencil(n: int) -> np.ndarray:
    """(n, 2) left/right neighbors of a 1-D chain; end points reuse themselves (zero flux)."""
    i = np.arange(n)
    return np.stack([np.maximum(i - 1, 0), np.minimum(i + 1, n - 1)], axis=1)


def linear_phi_layer(weight, average: bool = False) -> DULayer:
    """DU with phi(x) = W x (no bias, no varphi), for classical-limit checks."""
    w = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    d = w.shape[0]
    layer = DULayer(d, k=2, use_varphi=False, average=average, phi_hidden=[])
    # phi acts on row vectors: y = x @ W^T
    layer.phi.layers[0].weight.data = w.T.copy()
    layer.phi.layers[0].bias.data = np.zeros(d)
    return layer
