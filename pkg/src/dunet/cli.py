"""``dunet`` command line: generate, train, eval, ablate, analyze-edge, smoothness.

Every command reads a flat ``section.key = value`` config (``--config``),
applies ``--seed``/``--out``/``--set`` overrides and writes its outputs plus
the effective config under the output directory.  Failures print a single
JSON line ``{"error": ..., "message": ...}`` to stderr and exit with 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, serialize_config
from .data import Dataset, read_cloud, write_cloud, write_ply_scalar
from .experiments import (
    ablation_csv,
    band_contrast,
    build_dataset,
    edge_analysis,
    load_checkpoint,
    phi_from_config,
    run_ablation,
    run_training,
    save_checkpoint,
    smoothness_fields,
    write_json,
)
from .net import du_k_effective
from .training import TrainingDiverged, evaluate

DATA_DIR = "data"
CHECKPOINT = "checkpoint.bin"


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        overrides[key.strip().replace(".", "__")] = value.strip()
    return cfg.with_values(**overrides).validate()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(serialize_config(cfg), encoding="utf-8")
    return out


def _write_dataset(out: Path, dataset: Dataset, cfg: RunConfig) -> dict:
    data_dir = out / DATA_DIR
    data_dir.mkdir(parents=True, exist_ok=True)
    files = {"train": [], "test": []}
    for split in ("train", "test"):
        for j, i in enumerate(getattr(dataset, split)):
            name = f"{split}_{j:03d}.csv"
            write_cloud(data_dir / name, dataset.samples[i])
            files[split].append(name)
    counts = np.zeros(dataset.num_classes, dtype=np.int64)
    for cloud in dataset.samples:
        counts += np.bincount(cloud.labels, minlength=dataset.num_classes)
    recipe = cfg.recipe()
    manifest = {
        "recipe": recipe.kind, "n": recipe.n, "noise_sigma": recipe.noise_sigma,
        "seed": cfg.seed, "recipe_seed": recipe.seed, "num_classes": dataset.num_classes,
        "class_counts": counts.tolist(), "files": files,
    }
    write_json(data_dir / "manifest.json", manifest)
    return manifest


def _read_dataset(out: Path) -> Dataset | None:
    path = out / DATA_DIR / "manifest.json"
    if not path.exists():
        return None
    manifest = json.loads(path.read_text(encoding="utf-8"))
    samples, split = [], {"train": [], "test": []}
    for name in ("train", "test"):
        for f in manifest["files"][name]:
            split[name].append(len(samples))
            samples.append(read_cloud(out / DATA_DIR / f))
    return Dataset(samples, manifest["num_classes"], split["train"], split["test"])


def _dataset(cfg: RunConfig, out: Path) -> Dataset:
    """Dataset files under the output directory, written first if absent."""
    dataset = _read_dataset(out)
    if dataset is None:
        _write_dataset(out, build_dataset(cfg), cfg)
        dataset = _read_dataset(out)
    return dataset


def cmd_generate(cfg: RunConfig) -> dict:
    dataset = build_dataset(cfg)
    out = _out_dir(cfg)
    return _write_dataset(out, dataset, cfg)


def cmd_train(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    dataset = _dataset(cfg, out)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")

    def log(row):
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    result = run_training(cfg, dataset, log)
    save_checkpoint(out / CHECKPOINT, result.net)
    spec = result.net.spec
    summary = {"final": result.history[-1], "test": result.metrics,
               "param_count": result.net.param_count(), "spec": spec.as_dict(),
               # DU neighborhoods are clamped to level size - 1 on small levels
               "du_k_effective": du_k_effective(spec, cfg.data.n)}
    write_json(out / "summary.json", summary)
    return summary


def cmd_eval(cfg: RunConfig, checkpoint) -> dict:
    out = _out_dir(cfg)
    dataset = _dataset(cfg, out)
    net = load_checkpoint(checkpoint or out / CHECKPOINT, cfg, dataset)
    metrics = evaluate(net, dataset)
    write_json(out / "eval.json", metrics)
    return metrics


def cmd_ablate(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    rows = run_ablation(cfg)
    text = ablation_csv(rows)
    tmp = out / "ablation.csv.tmp"
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(out / "ablation.csv")
    failed = [r for r in rows if r["status"] != "ok"]
    return {"runs": len(rows), "failed": len(failed), "table": str(out / "ablation.csv")}


def cmd_analyze_edge(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    a = cfg.analysis
    phi = phi_from_config(cfg)
    text, summary = edge_analysis(phi, a.sigma, a.halfwidth, a.samples)
    (out / "edge_profile.csv").write_text(text, encoding="utf-8")
    summary["phi"] = a.phi
    write_json(out / "edge_summary.json", summary)
    return summary


def cmd_smoothness(cfg: RunConfig) -> dict:
    out = _out_dir(cfg)
    s = cfg.smoothness
    dataset = _dataset(cfg, out)
    net = load_checkpoint(s.checkpoint or out / CHECKPOINT, cfg, dataset)
    cloud = read_cloud(s.sample) if s.sample else dataset.samples[dataset.test[0]]
    fields = smoothness_fields(net, cloud, s.stage, s.mode)
    lines = ["x,y,z,before,after,delta"]
    for p, b, a, d in zip(fields.positions.tolist(), fields.before.tolist(),
                          fields.after.tolist(), fields.delta.tolist()):
        lines.append(f"{p[0]!r},{p[1]!r},{p[2]!r},{b!r},{a!r},{d!r}")
    (out / "smoothness.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, values in (("before", fields.before), ("after", fields.after), ("delta", fields.delta)):
        write_ply_scalar(out / f"smoothness_{name}.ply", fields.positions, values, name)
    summary = {"stage": s.stage, "points": int(len(fields.delta)),
               "mean_before": float(fields.before.mean()), "mean_after": float(fields.after.mean()),
               "mean_delta": float(fields.delta.mean())}
    if fields.labels is not None and len(np.unique(fields.labels)) > 1:
        band, interior = band_contrast(fields)
        summary.update(band_mean_delta=band, interior_mean_delta=interior)
    write_json(out / "smoothness_summary.json", summary)
    return summary


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dunet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "ablate", "analyze-edge", "smoothness"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key, e.g. --set train.epochs=5")
        if name == "eval":
            sp.add_argument("--checkpoint", help="parameter file (default: OUT/checkpoint.bin)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "generate":
            result = cmd_generate(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint)
        elif args.command == "ablate":
            result = cmd_ablate(cfg)
        elif args.command == "analyze-edge":
            result = cmd_analyze_edge(cfg)
        else:
            result = cmd_smoothness(cfg)
    except TrainingDiverged as exc:
        _fail("TrainingDiverged", str(exc), op=exc.op)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc))
        return 2
    print(json.dumps(result, sort_keys=True))
    return 0


def _fail(kind: str, message: str, **extra) -> None:
    record = {"error": kind, "message": message.replace("\n", " "), **extra}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
