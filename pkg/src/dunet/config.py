"""Run configuration as flat ``section.key = value`` text.

Lines starting with ``#`` and blank lines are ignored.  Tuples are written as
comma-separated lists, booleans as ``true``/``false``.  Unknown keys are an
error so a typo never silently falls back to a default.
"""

from __future__ import annotations

import re

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import RECIPES, AugmentConfig, ShapeRecipe
from .du import ABLATION_TABLE
from .net import DECODER_KINDS, NetworkSpec, default_spec
from .training import DATA, TrainSettings, stream_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    recipe: str = "two_part_cylinder"
    n: int = 512
    noise_sigma: float = 0.005
    samples: int = 20
    test: int = 8


@dataclass(frozen=True)
class NetSection:
    widths: tuple = (32, 64, 128, 256)
    ratio: int = 4
    k_encoder: int = 16
    decoder: str = "du"
    # one flag per decoder stage, coarsest first
    du_stages: tuple = (True, True, True, True)
    encoder_du: bool = False


@dataclass(frozen=True)
class DUSection:
    k: int = 16
    edge_feature: str = "difference"
    use_phi: bool = True
    use_varphi: bool = True
    # 1..8 selects an ablation row and overrides the four fields above; 0 = unset
    model_id: int = 0


@dataclass(frozen=True)
class OptimSection:
    name: str = "adamw"
    lr: float = 0.005
    weight_decay: float = 1e-4
    momentum: float = 0.9
    schedule: str = "cosine"


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 20
    label_smoothing: float = 0.2
    augment: bool = True
    scale: tuple = (0.66, 1.5)
    translate: tuple = (-0.2, 0.2)
    jitter: float = 0.01
    rotate: bool = True


@dataclass(frozen=True)
class AblateSection:
    seeds: tuple = (0,)
    epochs: int = 10


@dataclass(frozen=True)
class AnalysisSection:
    sigma: float = 1.0
    halfwidth: float = 6.0
    samples: int = 241
    # random | weight | checkpoint
    phi: str = "weight"
    weight: float = -1.0
    channels: int = 4
    checkpoint: str = ""
    stage: int = -1


@dataclass(frozen=True)
class SmoothnessSection:
    checkpoint: str = ""
    sample: str = ""
    stage: int = -1
    mode: str = "aggregate"


SECTIONS = {
    "data": DataSection, "net": NetSection, "du": DUSection, "optim": OptimSection,
    "train": TrainSection, "ablate": AblateSection, "analysis": AnalysisSection,
    "smoothness": SmoothnessSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    net: NetSection = field(default_factory=NetSection)
    du: DUSection = field(default_factory=DUSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    smoothness: SmoothnessSection = field(default_factory=SmoothnessSection)

    def validate(self):
        d = self.data
        if d.recipe not in RECIPES:
            raise ConfigError(f"data.recipe: unknown recipe {d.recipe!r}")
        self.recipe().validate()
        if not 0 < d.test < d.samples:
            raise ConfigError("data.test must satisfy 0 < test < samples")
        if self.net.decoder not in DECODER_KINDS:
            raise ConfigError(f"net.decoder must be one of {DECODER_KINDS}")
        if len(self.net.du_stages) != len(self.net.widths):
            raise ConfigError("net.du_stages needs one flag per stage")
        if self.du.model_id and self.du.model_id not in ABLATION_TABLE:
            raise ConfigError(f"du.model_id must be 0 or 1..8, got {self.du.model_id}")
        if self.analysis.phi not in ("random", "weight", "checkpoint"):
            raise ConfigError("analysis.phi must be random, weight or checkpoint")
        try:
            self.train_settings().validate()
            self.network_spec(2, 0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def recipe(self) -> ShapeRecipe:
        return ShapeRecipe(self.data.recipe, self.data.n, self.data.noise_sigma, stream_seed(self.seed, DATA))

    def du_fields(self) -> dict:
        du = self.du
        if du.model_id:
            row = ABLATION_TABLE[du.model_id]
            return {"du_k": row.k, "du_edge_feature": row.edge_feature,
                    "du_use_phi": row.use_phi, "du_use_varphi": row.use_varphi}
        return {"du_k": du.k, "du_edge_feature": du.edge_feature,
                "du_use_phi": du.use_phi, "du_use_varphi": du.use_varphi}

    def network_spec(self, num_classes: int, in_features: int) -> NetworkSpec:
        n = self.net
        return default_spec(self.data.n, num_classes, in_features, widths=n.widths, ratio=n.ratio,
                            k_encoder=n.k_encoder, decoder_kind=n.decoder, du_stages=n.du_stages,
                            encoder_du=n.encoder_du, **self.du_fields())

    def train_settings(self) -> TrainSettings:
        t, o = self.train, self.optim
        aug = AugmentConfig(t.scale, t.translate, t.jitter, t.rotate) if t.augment else AugmentConfig.none()
        return TrainSettings(epochs=t.epochs, lr=o.lr, optimizer=o.name, weight_decay=o.weight_decay,
                             momentum=o.momentum, schedule=o.schedule, label_smoothing=t.label_smoothing,
                             augment=aug)

    def with_values(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` (or top-level ``key=value``) overrides."""
        cfg = self
        for key, value in dotted.items():
            cfg = _set(cfg, key.replace("__", "."), value)
        return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def _element_type(default: tuple):
    if not default:
        return str
    return type(default[0])


def _parse(text: str, default):
    if isinstance(default, tuple):
        if not text.strip():
            return ()
        kind = _element_type(default)
        return tuple(_parse_scalar(part, kind) for part in text.split(","))
    return _parse_scalar(text, type(default))


def _set(cfg: RunConfig, dotted: str, value) -> RunConfig:
    section, _, key = dotted.partition(".")
    if not key:
        if section not in ("seed", "out"):
            raise ConfigError(f"unknown key {dotted!r}")
        default = getattr(RunConfig(), section)
        return replace(cfg, **{section: _parse(value, default) if isinstance(value, str) else value})
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r}")
    sub = getattr(cfg, section)
    names = {f.name for f in fields(sub)}
    if key not in names:
        raise ConfigError(f"unknown key {dotted!r}")
    default = getattr(SECTIONS[section](), key)
    if isinstance(value, str):
        value = _parse(value, default)
    elif isinstance(default, tuple):
        value = tuple(value)
    return replace(cfg, **{section: replace(sub, **{key: value})})


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        # "#" after whitespace starts a trailing comment
        line = re.split(r"(?:^|\s)#", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        try:
            cfg = _set(cfg, key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key.strip()}: {exc}") from None
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"seed = {cfg.seed}", f"out = {cfg.out}"]
    for name in SECTIONS:
        sub = getattr(cfg, name)
        for f in fields(sub):
            lines.append(f"{name}.{f.name} = {_format(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
