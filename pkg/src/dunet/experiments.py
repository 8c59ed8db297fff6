"""Whole-run helpers shared by the command line and the acceptance suite."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .analysis import (
    boundary_band,
    classify_edge_behavior,
    edge_change_rate,
    classify_rate,
    local_smoothness,
    step_edge_profile,
)
from .config import RunConfig
from .data import Dataset, generate_dataset
from .diffcore import MLP, load_params, save_params
from .du import ABLATION_TABLE, DULayer
from .geom import knn
from .net import DUNet, build_geometry, du_layers, segment
from .training import INIT, evaluate, stream_seed, train

STAGE_ROWS = {
    "all": (True, True, True, True),
    "stage1": (True, False, False, False),
    "stage2": (False, True, False, False),
    "stage3": (False, False, True, False),
    "stage4": (False, False, False, True),
    "w/o DU": None,
}


@dataclass
class RunResult:
    net: DUNet
    dataset: Dataset
    history: list
    metrics: dict


def build_dataset(cfg: RunConfig) -> Dataset:
    return generate_dataset(cfg.recipe(), cfg.data.samples, cfg.data.test)


def build_net(cfg: RunConfig, dataset: Dataset) -> DUNet:
    spec = cfg.network_spec(dataset.num_classes, dataset.samples[0].feature_dim)
    return DUNet(spec, stream_seed(cfg.seed, INIT))


def run_training(cfg: RunConfig, dataset: Dataset | None = None, log=None) -> RunResult:
    cfg.validate()
    dataset = dataset or build_dataset(cfg)
    net = build_net(cfg, dataset)
    history = train(net, dataset, cfg.train_settings(), cfg.seed, log)
    return RunResult(net, dataset, history, evaluate(net, dataset))


def save_checkpoint(path, net: DUNet) -> None:
    save_params(path, net.state_dict())


def load_checkpoint(path, cfg: RunConfig, dataset: Dataset) -> DUNet:
    state = load_params(path)
    net = build_net(cfg, dataset)
    head = state.get("head.weight")
    if head is not None and head.shape[1] != dataset.num_classes:
        raise ValueError(f"class-count mismatch: checkpoint has {head.shape[1]} classes, "
                         f"dataset has {dataset.num_classes}")
    net.load_state_dict(state)
    return net


# ---------------------------------------------------------------- ablation

def ablation_jobs(cfg: RunConfig):
    """(table, row id, seed, config) for every ablation and stage-placement run."""
    base = replace(cfg, train=replace(cfg.train, epochs=cfg.ablate.epochs))
    jobs = []
    for seed in cfg.ablate.seeds:
        for model_id in ABLATION_TABLE:
            c = base.with_values(seed=seed, net__decoder="du", net__du_stages=STAGE_ROWS["all"],
                                 du__model_id=model_id)
            jobs.append(("du_ablation", str(model_id), seed, c))
        for name, flags in STAGE_ROWS.items():
            if flags is None:
                c = base.with_values(seed=seed, net__decoder="feature_propagation_only", du__model_id=0)
            else:
                c = base.with_values(seed=seed, net__decoder="du", net__du_stages=flags, du__model_id=0)
            jobs.append(("du_stages", name, seed, c))
    return jobs


def _run_job(job):
    table, row, seed, cfg = job
    try:
        result = run_training(cfg)
        return {"table": table, "model_id": row, "seed": seed, "miou": float(result.metrics["miou"]),
                "param_count": result.net.param_count(), "status": "ok"}
    except Exception as exc:  # a failed member is recorded and the sweep continues
        return {"table": table, "model_id": row, "seed": seed, "miou": float("nan"),
                "param_count": -1, "status": f"error: {type(exc).__name__}: {exc}"}


def thread_cap() -> int:
    raw = os.environ.get("DU_THREADS", "")
    if raw.strip():
        value = int(raw)
        if value < 1:
            raise ValueError("DU_THREADS must be a positive integer")
        return value
    return os.cpu_count() or 1


def run_ablation(cfg: RunConfig, workers: int | None = None) -> list:
    jobs = ablation_jobs(cfg)
    workers = min(workers or thread_cap(), len(jobs))
    if workers <= 1:
        rows = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    return rows


def ablation_csv(rows) -> str:
    lines = ["table,model_id,seed,miou,param_count,status"]
    for r in rows:
        status = r["status"].replace(",", ";").replace("\n", " ")
        lines.append(f"{r['table']},{r['model_id']},{r['seed']},{r['miou']!r},{r['param_count']},{status}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- edge analysis

def phi_from_config(cfg: RunConfig):
    a = cfg.analysis
    if a.phi == "weight":
        return np.array([[a.weight]])
    if a.phi == "random":
        rng = np.random.default_rng(cfg.seed)
        return MLP([a.channels, a.channels, a.channels], rng)
    if not a.checkpoint:
        raise ValueError("analysis.checkpoint is required when analysis.phi = checkpoint")
    return checkpoint_du_layer(cfg, a.checkpoint, a.stage)


def checkpoint_du_layer(cfg: RunConfig, path, stage: int) -> DULayer:
    dataset = build_dataset(cfg)
    net = load_checkpoint(path, cfg, dataset)
    layers = du_layers(net)
    if not layers:
        raise ValueError(f"{path}: checkpoint has no DU layer")
    layer = _pick_stage(net, stage)
    if not isinstance(layer, DULayer):
        raise ValueError(f"{path}: decoder stage {stage} has no DU layer")
    if layer.phi is None:
        raise ValueError(f"{path}: DU layer at stage {stage} has no phi")
    return layer


def _pick_stage(net: DUNet, stage: int):
    count = len(net.blocks)
    if not -count <= stage < count:
        raise ValueError(f"invalid stage index {stage}: decoder has {count} stages")
    return net.blocks[stage]


def edge_analysis(phi, sigma: float, halfwidth: float, samples: int):
    """CSV rows over the profile plus a per-channel summary at the inflection point."""
    d = phi.d if isinstance(phi, DULayer) else (np.shape(phi)[0] if isinstance(phi, np.ndarray)
                                                 else phi.layers[0].din)
    profile = step_edge_profile(sigma, halfwidth, samples, np.ones(d))
    rate = edge_change_rate(phi, profile)
    labels = classify_rate(rate)
    behavior = classify_edge_behavior(phi, profile)
    lines = ["x,channel,u,u_x,u_xx,u_xxx,rate,classification"]
    cols = [a.tolist() for a in (profile.u, profile.ux, profile.uxx, profile.uxxx, rate)]
    for s, x in enumerate(profile.xs.tolist()):
        for c in range(d):
            u, ux, uxx, uxxx, r = (col[s][c] for col in cols)
            lines.append(f"{x!r},{c},{u!r},{ux!r},{uxx!r},{uxxx!r},{r!r},{labels[s, c]}")
    summary = {
        "sigma": sigma,
        "inflection_x": float(profile.xs[profile.inflection]),
        "classification": behavior.labels,
        "rate": behavior.rates.tolist(),
        "discrete_delta": behavior.discrete_delta.tolist(),
        "discrete_agrees": behavior.agrees.tolist(),
    }
    return "\n".join(lines) + "\n", summary


# ---------------------------------------------------------------- smoothness

@dataclass
class SmoothnessFields:
    positions: np.ndarray
    before: np.ndarray
    after: np.ndarray
    labels: np.ndarray | None

    @property
    def delta(self) -> np.ndarray:
        return self.after - self.before


def smoothness_fields(net: DUNet, cloud, stage: int = -1, mode: str = "aggregate") -> SmoothnessFields:
    """Local smoothness of the DU input and output at one decoder stage (eval mode)."""
    block = _pick_stage(net, stage)
    if not isinstance(block, DULayer):
        raise ValueError(f"decoder stage {stage} has no DU layer")
    t = stage % len(net.blocks)
    net.eval()
    geo = build_geometry(net.spec, cloud)
    taps = {}
    segment(net, cloud, geo, taps)
    before, after, level = taps[t]
    nbr = level.neighbors(min(net.spec.du_k, level.n - 1), include_self=False)
    labels = None
    if cloud.labels is not None:
        # subsampled levels are input points, so the nearest input point is the point itself
        labels = cloud.labels[knn(cloud.positions, level.positions, k=1).indices[:, 0]]
    return SmoothnessFields(level.positions, local_smoothness(before, nbr, mode),
                            local_smoothness(after, nbr, mode), labels)


def band_contrast(fields: SmoothnessFields) -> tuple:
    """(mean delta on the label-boundary band, mean delta elsewhere); None for an empty side."""
    band = boundary_band(fields.positions, fields.labels)
    delta = fields.delta
    return tuple(float(delta[m].mean()) if m.any() else None for m in (band, ~band))


def write_json(path, obj) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
