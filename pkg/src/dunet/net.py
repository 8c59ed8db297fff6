"""Toy encoder-decoder segmentation network with Diffusion Unit decoder stages.

Encoder stage: neighbor features concatenated with relative positions,
linear, ReLU, max over the neighborhood (plus a residual when widths agree),
then farthest point sampling to the stage's point count.

Decoder stage, coarse to fine: inverse-distance upsampling to the next finer
level, concatenation with that level's skip feature, linear projection, then
either a DU (``decoder_kind="du"``) or a residual pointwise MLP.  The last
decoder stage returns to the input points, with the input features as skip.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Linear, Module, Tensor, ops
from .du import EDGE_FEATURES, DULayer
from .geom import GeometryError, PointCloud, farthest_point_sample, interp_weights, knn, lexicographic_start

DECODER_KINDS = ("du", "feature_propagation_only")
DEFAULT_WIDTHS = (32, 64, 128, 256)


@dataclass(frozen=True)
class StageSpec:
    points_out: int
    channels: int
    k_encoder: int = 16


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple
    decoder_kind: str = "du"
    num_classes: int = 2
    in_features: int = 0
    du_k: int = 16
    du_edge_feature: str = "difference"
    du_use_phi: bool = True
    du_use_varphi: bool = True
    # per decoder stage, coarsest first; None enables every stage
    du_stages: tuple | None = None
    encoder_du: bool = False

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if self.du_stages is not None:
            object.__setattr__(self, "du_stages", tuple(bool(x) for x in self.du_stages))
        self.validate()

    def validate(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        for a, b in zip(self.stages, self.stages[1:]):
            if b.points_out > a.points_out:
                raise ValueError("points_out must be nonincreasing across stages")
            if b.channels < a.channels:
                raise ValueError("channels must be nondecreasing across stages")
        for s in self.stages:
            if s.points_out < 1 or s.channels < 1 or s.k_encoder < 1:
                raise ValueError(f"invalid stage {s}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ValueError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.in_features < 0:
            raise ValueError("in_features must be >= 0")
        if self.du_k < 1:
            raise ValueError("du_k must be positive")
        if self.du_edge_feature not in EDGE_FEATURES:
            raise ValueError(f"du_edge_feature must be one of {EDGE_FEATURES}")
        if self.du_stages is not None and len(self.du_stages) != len(self.stages):
            raise ValueError(f"du_stages needs {len(self.stages)} flags, got {len(self.du_stages)}")

    @property
    def input_dim(self) -> int:
        return 3 + self.in_features

    @property
    def decoder_widths(self) -> tuple:
        """Decoder stage widths, coarsest first; each matches its skip level."""
        ch = [s.channels for s in self.stages]
        return tuple(ch[:-1][::-1]) + (ch[0],)

    def du_enabled(self, stage: int) -> bool:
        if self.decoder_kind != "du":
            return False
        return True if self.du_stages is None else self.du_stages[stage]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d


def default_spec(n: int = 512, num_classes: int = 2, in_features: int = 0,
                 widths=DEFAULT_WIDTHS, ratio: int = 4, k_encoder: int = 16, **kwargs) -> NetworkSpec:
    """Stage s keeps n / ratio**s points (the first stage keeps all of them)."""
    stages = [StageSpec(max(1, n // ratio**s), int(w), k_encoder) for s, w in enumerate(widths)]
    return NetworkSpec(tuple(stages), num_classes=num_classes, in_features=in_features, **kwargs)


@dataclass
class Level:
    """One resolution of the hierarchy: positions plus cached neighborhoods."""

    positions: np.ndarray
    knn_cache: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def neighbors(self, k: int, include_self: bool):
        key = (k, include_self)
        if key not in self.knn_cache:
            self.knn_cache[key] = knn(self.positions, k=k, include_self=include_self)
        return self.knn_cache[key]


class ResidualMLP(Module):
    """u + W2 relu(W1 u + b1) + b2 with the second layer starting at zero."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d, rng)
        self.fc2 = Linear(d, d, zero=True)

    def __call__(self, u: Tensor, nbr=None) -> Tensor:
        return ops.add(u, self.fc2(ops.relu(self.fc1(u))))


class EncoderBlock(Module):
    def __init__(self, din: int, dout: int, k: int, rng: np.random.Generator):
        self.k = k
        self.fc = Linear(din + 3, dout, rng)
        self.residual = din == dout

    def __call__(self, x: Tensor, level: Level) -> Tensor:
        nbr = level.neighbors(min(self.k, level.n), include_self=True)
        rel = level.positions[nbr.indices] - level.positions[:, None, :]
        h = ops.concat([ops.gather_feat(x, nbr), Tensor(rel)], axis=-1)
        h = ops.max_over_neighbors(ops.relu(self.fc(h)))
        return ops.add(x, h) if self.residual else h


def _streams(seed: int, count: int):
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))) for i in range(count)]


class DUNet(Module):
    """Parameters of a network described by a NetworkSpec.

    Random streams are split by role (encoder, projections, decoder blocks,
    DU layers), so a ``du`` and a ``feature_propagation_only`` network built
    from the same seed share every encoder and projection weight.
    """

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        enc_rng, proj_rng, block_rng, du_rng, encdu_rng = _streams(seed, 5)
        widths = [s.channels for s in spec.stages]
        dins = [spec.input_dim] + widths[:-1]
        self.encoder = [EncoderBlock(a, b, s.k_encoder, enc_rng)
                        for a, b, s in zip(dins, widths, spec.stages)]
        self.encoder_du = [DULayer(w, k=spec.du_k, rng=encdu_rng) for w in widths] if spec.encoder_du else []

        skips = widths[:-1][::-1] + [spec.input_dim]
        self.proj, self.blocks = [], []
        cur = widths[-1]
        for t, (skip, w) in enumerate(zip(skips, spec.decoder_widths)):
            self.proj.append(Linear(cur + skip, w, proj_rng))
            block = ResidualMLP(w, block_rng)  # always drawn, keeps streams aligned
            if spec.du_enabled(t):
                block = DULayer(w, k=spec.du_k, edge_feature=spec.du_edge_feature,
                                use_phi=spec.du_use_phi, use_varphi=spec.du_use_varphi, rng=du_rng)
            self.blocks.append(block)
            cur = w
        self.head = Linear(cur, spec.num_classes, zero=True)


def input_features(spec: NetworkSpec, cloud: PointCloud) -> np.ndarray:
    """Centered coordinates followed by the cloud's own features."""
    if cloud.feature_dim != spec.in_features:
        raise ValueError(f"network expects {spec.in_features} input features, cloud has {cloud.feature_dim}")
    centered = cloud.positions - ops.ordered_sum(cloud.positions, 0) / cloud.n
    if cloud.features is None:
        return centered
    return np.concatenate([centered, cloud.features], axis=1)


@dataclass
class Geometry:
    """Per-cloud hierarchy: levels[0] is the input, levels[s + 1] follows encoder stage s."""

    levels: list
    samples: list  # FPS indices into the previous level, None when nothing was dropped
    interp: dict = field(default_factory=dict)

    def upsample(self, coarse: int, fine: int):
        if (coarse, fine) not in self.interp:
            self.interp[(coarse, fine)] = interp_weights(self.levels[coarse].positions,
                                                         self.levels[fine].positions,
                                                         k=min(3, self.levels[coarse].n))
        return self.interp[(coarse, fine)]


def build_geometry(spec: NetworkSpec, cloud: PointCloud) -> Geometry:
    if cloud.n < spec.stages[-1].points_out:
        raise GeometryError(f"insufficient points: {cloud.n} < final stage size {spec.stages[-1].points_out}")
    levels = [Level(cloud.positions)]
    samples = []
    for s in spec.stages:
        prev = levels[-1]
        m = min(s.points_out, prev.n)
        if m == prev.n:
            samples.append(None)
            levels.append(prev)
        else:
            idx = farthest_point_sample(prev.positions, m, start=lexicographic_start(prev.positions))
            samples.append(idx)
            levels.append(Level(prev.positions[idx]))
    return Geometry(levels, samples)


def _du_neighbors(level: Level, k: int):
    if level.n < 2:
        raise GeometryError("a DU needs at least two points")
    return level.neighbors(min(k, level.n - 1), include_self=False)


def encode(net: DUNet, cloud: PointCloud, geometry: Geometry | None = None):
    """Per stage (PointCloud at that stage's resolution, feature Tensor)."""
    spec = net.spec
    geo = geometry or build_geometry(spec, cloud)
    x = Tensor(input_features(spec, cloud))
    outputs = []
    for s, block in enumerate(net.encoder):
        x = block(x, geo.levels[s])
        if net.encoder_du:
            x = net.encoder_du[s](x, _du_neighbors(geo.levels[s], spec.du_k))
        if geo.samples[s] is not None:
            x = ops.take_rows(x, geo.samples[s])
        outputs.append((PointCloud(geo.levels[s + 1].positions), x))
    return outputs, geo


def _decode(net: DUNet, cloud: PointCloud, outputs, geo: Geometry, use_blocks: bool, taps=None):
    spec = net.spec
    S = len(spec.stages)
    if len(outputs) != S:
        raise ValueError(f"expected {S} encoder outputs, got {len(outputs)}")
    skips = [outputs[s][1] for s in range(S - 1)][::-1] + [Tensor(input_features(spec, cloud))]
    x = outputs[-1][1]
    coarse = S
    for t in range(S):
        fine = S - 1 - t
        nbr, w = geo.upsample(coarse, fine)
        up = ops.interpolate(x, nbr, w)
        skip = skips[t]
        if up.shape[0] != skip.shape[0]:
            raise ValueError(f"decoder stage {t}: {up.shape[0]} upsampled rows vs {skip.shape[0]} skip rows")
        h = ops.concat([up, skip], axis=-1)
        if h.shape[1] != net.proj[t].din:
            raise ValueError(f"decoder stage {t}: width {h.shape[1]} != projection input {net.proj[t].din}")
        h = net.proj[t](h)
        block = net.blocks[t] if use_blocks else None
        if isinstance(block, DULayer):
            before = h
            h = block(h, _du_neighbors(geo.levels[fine], spec.du_k))
            if taps is not None:
                taps[t] = (before, h, geo.levels[fine])
        elif block is not None:
            h = block(h)
        x, coarse = h, fine
    return x


def decode_du(net: DUNet, cloud: PointCloud, outputs, geometry: Geometry, taps=None) -> Tensor:
    """Decoder features at the input points; ``taps`` collects DU input/output per stage."""
    return _decode(net, cloud, outputs, geometry, True, taps)


def decode_fp(net: DUNet, cloud: PointCloud, outputs, geometry: Geometry) -> Tensor:
    """Decoder features with every DU stage replaced by the residual pointwise MLP."""
    if any(isinstance(b, DULayer) for b in net.blocks):
        raise ValueError("decode_fp needs a network built with decoder_kind='feature_propagation_only'")
    return _decode(net, cloud, outputs, geometry, True)


def segment(net: DUNet, cloud: PointCloud, geometry: Geometry | None = None, taps=None) -> Tensor:
    outputs, geo = encode(net, cloud, geometry)
    feats = decode_du(net, cloud, outputs, geo, taps)
    return net.head(feats)


def du_layers(net: DUNet):
    """(decoder stage, layer) for every DU in the decoder."""
    return [(t, b) for t, b in enumerate(net.blocks) if isinstance(b, DULayer)]


def du_k_effective(spec: NetworkSpec, cloud_n: int) -> list:
    """Neighborhood size each decoder DU actually uses (clamped to level size - 1)."""
    sizes = [cloud_n]
    for s in spec.stages:
        sizes.append(min(s.points_out, sizes[-1]))
    S = len(spec.stages)
    return [min(spec.du_k, sizes[S - 1 - t] - 1) for t in range(S)]
