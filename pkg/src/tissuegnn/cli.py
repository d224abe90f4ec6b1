"""Command-line entry point.

Subcommands: datagen, train, eval, infer, stats, serve. Every run echoes its
fully resolved configuration into the output directory. Exit codes: 0 ok,
2 configuration/usage, 3 I/O or file format, 4 numeric/runtime.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import datagen as dg
from . import training as tr
from .config import dump_config, load_config
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    NonFiniteError,
    TissueGnnError,
)
from .geometry import PointCloud
from .model import init_params, load_checkpoint, model_forward, save_checkpoint
from .phantom import condition_features, point_features, read_tvol, write_tvol

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML run config (env TISSUEGNN_CONFIG "
                                    "is the fallback)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="parallelism cap")
    p.add_argument("--out", help="output directory")


def _resolved(args) -> "RunConfig":
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["generator"] = {"seed": args.seed}
    if args.workers is not None:
        overrides["workers"] = args.workers
    return load_config(args.config, overrides)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------- #
# subcommands


def cmd_datagen(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(args, "datagen_out")
    datasets = dg.generate_dataset(cfg.generator)
    stats = {}
    for name, ds in datasets.items():
        path = out / f"{name}.pcds"
        dg.write_dataset(ds, path)
        stats[name] = dg.dataset_stats(ds)
        if args.text_export:
            dg.write_dataset_text(ds, out / f"{name}.jsonl")
    vol = datasets["primary"].volume()
    write_tvol(vol, out / "phantom.tvol")
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    dump_config(cfg, out / "resolved_config.yaml")
    print(json.dumps(stats, indent=2))
    return 0


def cmd_train(args) -> int:
    cfg = _resolved(args)
    ds = dg.read_dataset(args.dataset)
    if not ds.samples:
        raise ConfigError("dataset is empty")
    out = _out_dir(args, "train_out")
    plan = tr.make_splits(ds.samples, ratios=cfg.training.ratios,
                          seed=cfg.training.split_seed)
    start_epoch = 0
    if args.resume:
        params, model_cfg, header = load_checkpoint(args.resume)
        if model_cfg.to_dict() != cfg.model.to_dict():
            raise ConfigError("resume checkpoint architecture differs from "
                              "the configured model")
        start_epoch = int(header.get("meta", {}).get("epochs_completed", 0))
    else:
        params = init_params(cfg.model, seed=cfg.seed)
    log_path = out / "train_log.jsonl"
    result = tr.train(ds.samples, params, cfg.model, plan, cfg.loss,
                      epochs=cfg.training.epochs,
                      batch_size=cfg.training.batch_size,
                      lr=cfg.training.lr, seed=cfg.seed, log_path=log_path,
                      start_epoch=start_epoch)
    meta = {
        "epochs_completed": start_epoch + cfg.training.epochs,
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "dataset": str(args.dataset),
    }
    ckpt_id = save_checkpoint(result.params, cfg.model, out / "best.ckpt",
                              meta=meta)
    save_checkpoint(result.final_params, cfg.model, out / "last.ckpt",
                    meta=meta)
    dump_config(cfg, out / "resolved_config.yaml")
    print(json.dumps({"checkpoint": str(out / "best.ckpt"),
                      "checkpoint_id": ckpt_id, **meta}))
    return 0


def cmd_eval(args) -> int:
    params, model_cfg, header = load_checkpoint(args.checkpoint)
    ds = dg.read_dataset(args.dataset)
    out = _out_dir(args, "eval_out")
    samples = ds.samples
    if args.split:
        plan = tr.make_splits(samples, seed=args.split_seed)
        samples = [samples[i] for i in getattr(plan, args.split)]
    volume = ds.volume() if args.protocol == "rotated" else None
    report = tr.evaluate(params, model_cfg, samples, protocol=args.protocol,
                         volume=volume)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def _load_points(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 coordinates, "
                                  f"got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate "
                                  f"in {line!r}") from None
    if not rows:
        raise FormatError(f"{path}: no points found")
    return np.asarray(rows)


def _parse_vec(text: str, flag: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{flag} expects x,y,z") from None
    if len(vals) != 3:
        raise ConfigError(f"{flag} expects exactly three components")
    return np.asarray(vals)


def cmd_infer(args) -> int:
    params, model_cfg, header = load_checkpoint(args.checkpoint)
    volume = read_tvol(args.volume)
    positions = _load_points(args.points)
    cloud = PointCloud(positions=positions,
                       features=point_features(volume, positions))
    c_s = _parse_vec(args.c_s, "--c-s")
    c_e = _parse_vec(args.c_e, "--c-e")
    from .phantom import ProbeCondition
    probe = ProbeCondition(c_s=c_s, c_e=c_e,
                           c_h=condition_features(volume, c_s, c_e))
    t0 = time.perf_counter()
    u, yhat, force = model_forward(params, model_cfg, cloud, probe)
    elapsed = time.perf_counter() - t0
    payload = {
        "displaced": np.asarray(yhat, dtype=float).tolist(),
        "magnitudes": np.linalg.norm(u, axis=1).tolist(),
        "force": force,
        "checkpoint_id": header["checkpoint_id"],
    }
    if args.timing:
        payload["latency_ms"] = elapsed * 1e3
    text = json.dumps(payload)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "inference.json").write_text(text)
    print(text)
    return 0


def cmd_stats(args) -> int:
    ds = dg.read_dataset(args.dataset)
    print(json.dumps(dg.dataset_stats(ds), indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_engine, create_app
    engine = build_engine(args.checkpoint, args.volume, args.surface,
                          max_depth=args.max_depth,
                          max_inclination=args.max_inclination)
    app = create_app(engine, static_dir=args.static_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tissuegnn",
        description="Point-cloud soft-tissue deformation and force "
                    "prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate an oracle dataset")
    _common_flags(p)
    p.add_argument("--text-export", action="store_true",
                   help="also write the human-readable JSONL export")
    p.set_defaults(fn=cmd_datagen)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--protocol", default="plain",
                   choices=["plain", "rotated", "cross_resolution"])
    p.add_argument("--split", choices=["train", "val", "test"],
                   help="evaluate only this split of the dataset")
    p.add_argument("--split-seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="single forward pass")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="TVOL1 phantom file")
    p.add_argument("--points", required=True, help="text file, one x y z per line")
    p.add_argument("--c-s", required=True, help="probe contact point x,y,z")
    p.add_argument("--c-e", required=True, help="probe tip x,y,z")
    p.add_argument("--timing", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("stats", help="dataset descriptive statistics")
    _common_flags(p)
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("serve", help="run the inference service")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--surface", required=True,
                   help="text file of rest surface points")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8464)
    p.add_argument("--max-depth", type=float, default=30.0)
    p.add_argument("--max-inclination", type=float, default=41.0)
    p.add_argument("--static-dir", help="UI build to serve at /")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, NonFiniteError, ContractError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TissueGnnError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
