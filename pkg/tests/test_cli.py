import csv
import json
import math

import numpy as np
import pytest

from dunet.cli import main
from dunet.config import RunConfig, load_config
from dunet.data import read_ply_scalar
from dunet.diffcore import save_params
from dunet.experiments import (
    STAGE_ROWS,
    build_dataset,
    build_net,
    save_checkpoint,
    smoothness_fields,
)
from dunet.net import DUNet, default_spec

TINY = ["--set", "data.n=64", "--set", "data.samples=4", "--set", "data.test=2",
        "--set", "net.widths=8,8,16,16", "--set", "train.epochs=1", "--set", "ablate.epochs=1"]


def run(capsys, *args):
    code = main(list(args))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_generate_writes_manifest_and_is_deterministic(tmp_path, capsys):
    out = tmp_path / "a"
    code, stdout, _ = run(capsys, "generate", "--out", str(out), "--seed", "3", *TINY)
    assert code == 0
    manifest = json.loads((out / "data" / "manifest.json").read_text())
    assert manifest["num_classes"] == 2 and len(manifest["class_counts"]) == 2
    assert sum(manifest["class_counts"]) == 4 * 64
    files = sorted((out / "data").glob("*.csv"))
    assert len(files) == 4
    first = {f.name: f.read_bytes() for f in files}
    run(capsys, "generate", "--out", str(out), "--seed", "3", *TINY)
    assert first == {f.name: f.read_bytes() for f in sorted((out / "data").glob("*.csv"))}
    assert json.loads(stdout)["recipe"] == "two_part_cylinder"


def test_generate_rejects_small_n_before_writing(tmp_path, capsys):
    out = tmp_path / "never"
    code, _, err = run(capsys, "generate", "--out", str(out), "--set", "data.n=8")
    assert code == 2
    record = json.loads(err.strip())
    assert "minimum" in record["message"]
    assert len(err.strip().splitlines()) == 1
    assert not out.exists()


def test_unwritable_output_is_an_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "generate", "--out", str(blocker / "sub"), *TINY)
    assert code == 2 and json.loads(err)["error"] in ("FileExistsError", "NotADirectoryError", "OSError")


def test_train_then_eval(tmp_path, capsys):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--out", str(out), *TINY, "--set", "train.epochs=2")
    assert code == 0
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert all(math.isfinite(r["loss"]) for r in rows)
    assert (out / "checkpoint.bin").exists() and (out / "summary.json").exists()
    assert load_config(out / "config.txt") == RunConfig().with_values(
        out=str(out), data__n=64, data__samples=4, data__test=2, net__widths=(8, 8, 16, 16),
        train__epochs=2, ablate__epochs=1)
    code, stdout, _ = run(capsys, "eval", "--out", str(out), *TINY)
    assert code == 0
    metrics = json.loads(stdout)
    assert set(metrics) >= {"miou", "accuracy", "per_class_iou"}
    assert json.loads((out / "eval.json").read_text())["miou"] == metrics["miou"]


def test_train_is_reproducible(tmp_path, capsys):
    outs = [tmp_path / "x", tmp_path / "y"]
    for out in outs:
        assert run(capsys, "train", "--out", str(out), "--seed", "5", *TINY)[0] == 0
    for name in ("metrics.jsonl", "checkpoint.bin", "summary.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_train_divergence_reports_operation(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path / "d"), *TINY,
                       "--set", "optim.lr=1e300", "--set", "optim.weight_decay=0.0",
                       "--set", "train.epochs=3")
    assert code == 2
    record = json.loads(err)
    assert record["error"] == "TrainingDiverged" and record["op"]


def test_eval_class_count_mismatch(tmp_path, capsys):
    out = tmp_path / "m"
    run(capsys, "generate", "--out", str(out), *TINY)
    wrong = DUNet(default_spec(64, 3, 1, widths=(8, 8, 16, 16)), 0)
    save_params(out / "wrong.bin", wrong.state_dict())
    code, _, err = run(capsys, "eval", "--out", str(out), *TINY, "--checkpoint", str(out / "wrong.bin"))
    assert code == 2 and "class-count mismatch" in json.loads(err)["message"]


def test_ablate_covers_all_rows_and_is_deterministic(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DU_THREADS", "1")
    tables = []
    for name in ("p", "q"):
        out = tmp_path / name
        code, stdout, _ = run(capsys, "ablate", "--out", str(out), *TINY)
        assert code == 0 and json.loads(stdout)["failed"] == 0
        tables.append((out / "ablation.csv").read_text())
    assert tables[0] == tables[1]
    rows = list(csv.DictReader(tables[0].splitlines()))
    du_rows = [r["model_id"] for r in rows if r["table"] == "du_ablation"]
    stage_rows = [r["model_id"] for r in rows if r["table"] == "du_stages"]
    assert du_rows == [str(i) for i in range(1, 9)]
    assert stage_rows == list(STAGE_ROWS)
    params = {r["model_id"]: int(r["param_count"]) for r in rows if r["table"] == "du_stages"}
    singles = [params[f"stage{i}"] for i in range(1, 5)]
    assert all(params["w/o DU"] < p < params["all"] for p in singles)


@pytest.mark.parametrize("weight,label", [(-1.0, "enhance"), (1.0, "suppress")])
def test_analyze_edge_fixed_weight(tmp_path, capsys, weight, label):
    out = tmp_path / "edge"
    code, stdout, _ = run(capsys, "analyze-edge", "--out", str(out), "--set", f"analysis.weight={weight}")
    assert code == 0
    summary = json.loads(stdout)
    assert summary["classification"] == [label] and summary["discrete_agrees"] == [True]
    rows = list(csv.DictReader((out / "edge_profile.csv").read_text().splitlines()))
    mid = min(rows, key=lambda r: abs(float(r["x"])))
    assert float(mid["x"]) == 0.0 and mid["classification"] == label


def test_analyze_edge_random_phi(tmp_path, capsys):
    code, stdout, _ = run(capsys, "analyze-edge", "--out", str(tmp_path / "r"),
                          "--set", "analysis.phi=random", "--set", "analysis.channels=3")
    assert code == 0 and len(json.loads(stdout)["classification"]) == 3


def test_analyze_edge_checkpoint_without_du(tmp_path, capsys):
    out = tmp_path / "fp"
    assert run(capsys, "train", "--out", str(out), *TINY, "--set", "net.decoder=feature_propagation_only")[0] == 0
    code, _, err = run(capsys, "analyze-edge", "--out", str(out), *TINY,
                       "--set", "net.decoder=feature_propagation_only",
                       "--set", "analysis.phi=checkpoint", "--set", f"analysis.checkpoint={out / 'checkpoint.bin'}")
    assert code == 2 and "no DU layer" in json.loads(err)["message"]


def test_analyze_edge_from_trained_checkpoint(tmp_path, capsys):
    out = tmp_path / "du"
    assert run(capsys, "train", "--out", str(out), *TINY, "--set", "train.epochs=2")[0] == 0
    code, stdout, _ = run(capsys, "analyze-edge", "--out", str(out), *TINY,
                          "--set", "analysis.phi=checkpoint", "--set", f"analysis.checkpoint={out / 'checkpoint.bin'}")
    assert code == 0
    assert len(json.loads(stdout)["classification"]) == 8


def test_smoothness_identity_init_gives_zero_delta(tmp_path, capsys):
    out = tmp_path / "s"
    cfg = RunConfig().with_values(out=str(out), data__n=64, data__samples=4, data__test=2,
                                  net__widths=(8, 8, 16, 16))
    out.mkdir()
    save_checkpoint(out / "checkpoint.bin", build_net(cfg, build_dataset(cfg)))
    code, stdout, _ = run(capsys, "smoothness", "--out", str(out), *TINY)
    assert code == 0
    rows = list(csv.DictReader((out / "smoothness.csv").read_text().splitlines()))
    assert len(rows) == 64 and all(float(r["delta"]) == 0.0 for r in rows)
    for name in ("before", "after", "delta"):
        pos, values, prop = read_ply_scalar(out / f"smoothness_{name}.ply")
        assert pos.shape == (64, 3) and prop == name
    assert json.loads(stdout)["mean_delta"] == 0.0


def test_smoothness_invalid_stage(tmp_path, capsys):
    out = tmp_path / "bad"
    assert run(capsys, "train", "--out", str(out), *TINY)[0] == 0
    code, _, err = run(capsys, "smoothness", "--out", str(out), *TINY, "--set", "smoothness.stage=7")
    assert code == 2 and "invalid stage" in json.loads(err)["message"]


def test_constant_du_input_has_zero_before_field():
    cfg = RunConfig().with_values(data__n=64, data__samples=4, data__test=2, net__widths=(8, 8, 16, 16))
    ds = build_dataset(cfg)
    net = build_net(cfg, ds)
    last = net.proj[-1]
    last.weight.data = np.zeros_like(last.weight.data)
    last.bias.data = np.full_like(last.bias.data, 0.7)
    fields = smoothness_fields(net, ds.samples[0])
    assert np.all(fields.before == 0.0)


def test_bad_set_syntax(capsys):
    code, _, err = run(capsys, "generate", "--set", "seed")
    assert code == 2 and "key=value" in json.loads(err)["message"]
