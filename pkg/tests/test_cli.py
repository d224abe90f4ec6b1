import json

import numpy as np
import pytest
import yaml

from tissuegnn.cli import main

from conftest import TINY_GENERATOR, TINY_MODEL


def write_cfg(path, epochs=2, **gen_overrides):
    gen = dict(TINY_GENERATOR)
    gen.update(gen_overrides)
    cfg = {
        "seed": 5,
        "generator": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in gen.items()},
        "model": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in TINY_MODEL.items()},
        "training": {"epochs": epochs, "batch_size": 8, "lr": 1e-3},
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_datagen_produces_dataset_and_stats(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.yaml")
    out = tmp_path / "out"
    rc = main(["datagen", "--config", str(cfg), "--out", str(out),
               "--text-export"])
    assert rc == 0
    assert (out / "primary.pcds").exists()
    assert (out / "primary.jsonl").exists()
    assert (out / "phantom.tvol").exists()
    assert (out / "resolved_config.yaml").exists()
    stats = json.loads((out / "stats.json").read_text())
    for key in ("f_max_mean", "d_mean_mean", "tip_mean_mean"):
        assert key in stats["primary"]


def test_datagen_deterministic_bytes(tmp_path):
    cfg = write_cfg(tmp_path / "cfg.yaml")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["datagen", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["datagen", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out1 / "primary.pcds").read_bytes() == \
        (out2 / "primary.pcds").read_bytes()


def test_datagen_rejects_bad_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.yaml", max_depth=-1.0)
    assert main(["datagen", "--config", str(cfg), "--out",
                 str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"generatr": {}}))
    assert main(["datagen", "--config", str(path),
                 "--out", str(tmp_path / "o")]) == 2


def _datagen(tmp_path, epochs=2):
    cfg = write_cfg(tmp_path / "cfg.yaml", epochs=epochs)
    data_dir = tmp_path / "data"
    assert main(["datagen", "--config", str(cfg), "--out", str(data_dir)]) == 0
    return cfg, data_dir / "primary.pcds", data_dir


def test_train_eval_round(tmp_path, capsys):
    cfg, dataset, data_dir = _datagen(tmp_path)
    train_out = tmp_path / "train"
    rc = main(["train", "--config", str(cfg), "--dataset", str(dataset),
               "--out", str(train_out)])
    assert rc == 0
    log = [json.loads(l) for l in
           (train_out / "train_log.jsonl").read_text().strip().split("\n")]
    assert [r["epoch"] for r in log] == [0, 1]
    assert (train_out / "best.ckpt").exists()
    capsys.readouterr()

    eval_out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(train_out / "best.ckpt"),
               "--dataset", str(dataset), "--protocol", "plain",
               "--out", str(eval_out)])
    assert rc == 0
    report = json.loads((eval_out / "report.json").read_text())
    assert report["protocol"] == "plain"
    assert "Mean Euclidean Distance [mm]" in \
        report["mean_euclidean"]["title"]


def test_train_missing_dataset_exits_io(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.yaml")
    rc = main(["train", "--config", str(cfg),
               "--dataset", str(tmp_path / "absent.pcds"),
               "--out", str(tmp_path / "t")])
    assert rc == 3


def test_train_resume_continues_epoch_numbering(tmp_path):
    cfg, dataset, _ = _datagen(tmp_path)
    first = tmp_path / "first"
    assert main(["train", "--config", str(cfg), "--dataset", str(dataset),
                 "--out", str(first)]) == 0
    second = tmp_path / "second"
    assert main(["train", "--config", str(cfg), "--dataset", str(dataset),
                 "--out", str(second), "--resume",
                 str(first / "last.ckpt")]) == 0
    log = [json.loads(l) for l in
           (second / "train_log.jsonl").read_text().strip().split("\n")]
    assert [r["epoch"] for r in log] == [2, 3]


def test_eval_rotated_has_per_angle_rows(tmp_path, capsys):
    cfg, dataset, _ = _datagen(tmp_path)
    train_out = tmp_path / "train"
    assert main(["train", "--config", str(cfg), "--dataset", str(dataset),
                 "--out", str(train_out)]) == 0
    eval_out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(train_out / "best.ckpt"),
               "--dataset", str(dataset), "--protocol", "rotated",
               "--split", "test", "--out", str(eval_out)])
    assert rc == 0
    report = json.loads((eval_out / "report.json").read_text())
    assert set(report["per_angle"]) == {"90", "180", "270"}


def test_infer_runs_and_is_deterministic(tmp_path, service_artifacts, capsys):
    pts = tmp_path / "pts.txt"
    pts.write_text("40 40 32\n50 50 32\n60 60 32\n45 55 32\n")
    argv = ["infer", "--checkpoint", str(service_artifacts["checkpoint"]),
            "--volume", str(service_artifacts["volume"]),
            "--points", str(pts), "--c-s", "50,50,32", "--c-e", "52,50,24",
            "--timing"]
    assert main(argv) == 0
    out1 = json.loads(capsys.readouterr().out)
    assert main(argv) == 0
    out2 = json.loads(capsys.readouterr().out)
    assert out1["displaced"] == out2["displaced"]
    assert out1["force"] == out2["force"]
    assert "latency_ms" in out1


def test_infer_malformed_points_reports_line(tmp_path, service_artifacts,
                                             capsys):
    pts = tmp_path / "pts.txt"
    pts.write_text("40 40 32\nnot a point\n")
    rc = main(["infer", "--checkpoint", str(service_artifacts["checkpoint"]),
               "--volume", str(service_artifacts["volume"]),
               "--points", str(pts), "--c-s", "50,50,32",
               "--c-e", "52,50,24"])
    assert rc == 3
    assert ":2:" in capsys.readouterr().err


def test_infer_probe_outside_footprint_fails(tmp_path, service_artifacts,
                                             capsys):
    pts = tmp_path / "pts.txt"
    pts.write_text("40 40 32\n")
    rc = main(["infer", "--checkpoint", str(service_artifacts["checkpoint"]),
               "--volume", str(service_artifacts["volume"]),
               "--points", str(pts), "--c-s", "150,50,32",
               "--c-e", "150,50,20"])
    assert rc != 0


def test_stats_command(tmp_path, capsys):
    cfg, dataset, _ = _datagen(tmp_path)
    capsys.readouterr()
    assert main(["stats", "--dataset", str(dataset)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["locations"] == TINY_GENERATOR["sites"]
