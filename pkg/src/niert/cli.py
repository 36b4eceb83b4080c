"""Command-line surface: gen / train / eval / predict / attn / baseline / serve.

Exit codes: 0 success, 2 usage, 3 IO, 4 numeric failure, 5 shape/config
mismatch. Flags override config-file values, which override built-in
defaults; the effective config is embedded in every output artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict

import numpy as np

from . import baseline as baseline_mod
from . import model as model_mod
from . import taskgen
from . import trainer as trainer_mod
from .errors import (CheckpointMismatch, ConfigError, FormatError, NonFiniteLoss,
                     NonFiniteValue, ShapeMismatch, SingularSystem)
from .model import ModelConfig
from .rng import RngStream
from .trainer import TrainConfig

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

_CONFIG_SECTIONS = {
    "model": {"d_x", "d_y", "num_layers", "d_model", "num_heads",
              "d_xemb", "d_yemb", "d_ff", "loss_norm"},
    "train": {"epochs", "batch_size", "tasks_per_epoch", "lr", "lr_decay",
              "loss_norm", "seed", "eval_every", "loss_targets_only",
              "vanilla_attention"},
    "data": {"family", "d_x", "count", "num_points", "n_min", "n_max",
             "sigma_base", "seed"},
    "eval": {"oracle", "vanilla"},
}


def load_run_config(path: str | None) -> dict:
    """Parse and validate a {model, train, data, eval} JSON config file."""
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    for section, body in doc.items():
        if section not in _CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key in body:
            if key not in _CONFIG_SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")
    return doc


def _merge(defaults: dict, config_section: dict, flag_values: dict) -> dict:
    """Precedence: explicit flags > config file > defaults."""
    out = dict(defaults)
    out.update(config_section)
    out.update({k: v for k, v in flag_values.items() if v is not None})
    return out


def _echo_config(effective: dict):
    print("config: " + json.dumps(effective, sort_keys=True, default=str))


def _write_metrics_csv(path, metrics: dict, effective_config: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "bin"])
        w.writerow(["config", json.dumps(effective_config, sort_keys=True, default=str), ""])
        for key in ("mse_target", "mae_target", "mse_observed", "mae_observed"):
            w.writerow([key, repr(metrics[key]), "all"])
        if "region_mae" in metrics:
            w.writerow(["region_mae", repr(metrics["region_mae"]), "all"])
        for label, vals in metrics["bins"].items():
            w.writerow(["mse_target", repr(vals["mse_target"]), label])
            w.writerow(["mae_target", repr(vals["mae_target"]), label])
            w.writerow(["tasks", str(vals["tasks"]), label])


def _dump_predictions(path, tasks, predictions, effective_config: dict):
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "niert-predictions",
                             "config": effective_config}, sort_keys=True,
                            default=str) + "\n")
        for task, (obs_pred, tgt_pred) in zip(tasks, predictions):
            fh.write(json.dumps({
                "source_id": task.source_id,
                "n": task.n,
                "observed_pred": obs_pred.tolist(),
                "target_pred": tgt_pred.tolist(),
                "target_truth": task.target_y.tolist(),
                "observed_truth": task.observed_y.tolist(),
            }) + "\n")


# --- subcommands --------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    data = _merge(
        {"family": "expr", "d_x": 1, "count": 100, "num_points": None,
         "n_min": None, "n_max": None, "sigma_base": None, "seed": 0},
        cfg.get("data", {}),
        {"family": args.family, "d_x": args.dx, "count": args.count,
         "num_points": args.points, "n_min": args.n_min, "n_max": args.n_max,
         "sigma_base": args.sigma_base, "seed": args.seed})
    _echo_config({"data": data})
    n_range = None
    if data["n_min"] is not None or data["n_max"] is not None:
        lo = data["n_min"] if data["n_min"] is not None else 5
        hi = data["n_max"] if data["n_max"] is not None else lo
        n_range = (lo, hi)
    stats = taskgen.GenerationStats()
    tasks = taskgen.generate_tasks(
        data["family"], data["d_x"], data["count"],
        RngStream(data["seed"], trainer_mod.GEN_STREAM_BASE),
        num_points=data["num_points"], n_range=n_range,
        sigma_base=data["sigma_base"], stats=stats)
    taskgen.write_dataset(tasks, args.out)
    print(f"wrote {len(tasks)} tasks (d_x={data['d_x']}, d_y=1) to {args.out}; "
          f"rejection rate {stats.rejection_rate:.3f}")
    return 0


def _model_config_from(args, cfg: dict) -> ModelConfig:
    model = _merge(
        {"d_x": 1, "d_y": 1, "num_layers": 3, "d_model": 64, "num_heads": 4,
         "d_xemb": 0, "d_yemb": 16, "d_ff": 0, "loss_norm": "L2"},
        cfg.get("model", {}),
        {"d_x": args.dx, "num_layers": args.layers, "d_model": args.d_model,
         "num_heads": args.heads, "loss_norm": args.loss_norm})
    return ModelConfig(**model)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    model_config = _model_config_from(args, cfg)
    train = _merge(
        {"epochs": 10, "batch_size": 32, "tasks_per_epoch": 2048,
         "lr": 1e-4, "lr_decay": 1.0, "loss_norm": model_config.loss_norm,
         "seed": 0, "eval_every": 0, "loss_targets_only": False,
         "vanilla_attention": False},
        cfg.get("train", {}),
        {"epochs": args.epochs, "batch_size": args.batch_size,
         "tasks_per_epoch": args.tasks_per_epoch, "lr": args.lr,
         "lr_decay": args.lr_decay, "seed": args.seed,
         "loss_targets_only": True if args.loss_targets_only else None,
         "vanilla_attention": True if args.vanilla_attention else None})
    if args.dataset:
        source = args.dataset
    else:
        data = _merge({"family": "gaussian", "d_x": model_config.d_x,
                       "num_points": None, "n_min": None, "n_max": None,
                       "sigma_base": None},
                      cfg.get("data", {}),
                      {"family": args.family, "d_x": args.dx,
                       "num_points": args.points, "n_min": args.n_min,
                       "n_max": args.n_max, "sigma_base": args.sigma_base})
        source = {"family": data["family"], "d_x": data["d_x"],
                  "num_points": data["num_points"],
                  "sigma_base": data["sigma_base"]}
        if data["n_min"] is not None and data["n_max"] is not None:
            source["n_range"] = [data["n_min"], data["n_max"]]
    effective = {"model": asdict(model_config), "train": train, "source": source}
    _echo_config(effective)
    train_config = TrainConfig(source=source, **train)

    init = None
    if args.init_checkpoint:
        ckpt_config, init, _ = model_mod.load_checkpoint(args.init_checkpoint)
        if ckpt_config != model_config:
            raise CheckpointMismatch("init checkpoint config differs from requested model")

    def stream_epoch(epoch, loss_value):
        print(f"{epoch + 1},{loss_value!r}", file=sys.stderr)

    params, report = trainer_mod.train(model_config, train_config, init=init,
                                       epoch_callback=stream_epoch)
    model_mod.save_checkpoint(args.out, model_config, params,
                              extra={"effective_config": effective})
    report.checkpoint_path = args.out
    report.metadata["effective_config"] = effective
    report_path = args.report or (args.out + ".report.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json())
    print(f"checkpoint written to {args.out}; report to {report_path}")
    return 0


def _load_eval_inputs(args):
    config, params, _ = model_mod.load_checkpoint(args.checkpoint)
    tasks = taskgen.read_dataset(args.dataset)
    for task in tasks:
        if task.d_x != config.d_x or task.d_y != config.d_y:
            raise ShapeMismatch(
                f"dataset dims ({task.d_x},{task.d_y}) vs checkpoint "
                f"({config.d_x},{config.d_y})")
    return config, params, tasks


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    opts = _merge({"oracle": False, "vanilla": False}, cfg.get("eval", {}),
                  {"oracle": True if args.oracle else None,
                   "vanilla": True if args.vanilla else None})
    config, params, tasks = _load_eval_inputs(args)
    effective = {"eval": opts, "checkpoint": args.checkpoint, "dataset": args.dataset}
    _echo_config(effective)
    if opts["oracle"]:
        predictions = [(t.observed_y.copy(), t.target_y.copy()) for t in tasks]
    else:
        predictions = trainer_mod.predict_tasks(params, config, tasks,
                                                vanilla=opts["vanilla"])
    metrics = trainer_mod.metrics_from_predictions(tasks, predictions)
    _write_metrics_csv(args.out, metrics, effective)
    if args.dump_predictions:
        _dump_predictions(args.dump_predictions, tasks, predictions, effective)
    print(f"mse_target={metrics['mse_target']:.6g} "
          f"mae_target={metrics['mae_target']:.6g} -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    config, params, tasks = _load_eval_inputs(args)
    effective = {"checkpoint": args.checkpoint, "dataset": args.dataset}
    _echo_config(effective)
    predictions = trainer_mod.predict_tasks(params, config, tasks)
    _dump_predictions(args.out, tasks, predictions, effective)
    print(f"wrote per-task predictions for {len(tasks)} tasks to {args.out}")
    return 0


def cmd_attn(args) -> int:
    config, params, tasks = _load_eval_inputs(args)
    if not (0 <= args.task_index < len(tasks)):
        raise ShapeMismatch(f"task index {args.task_index} out of range")
    task = tasks[args.task_index]
    if not (0 <= args.layer < config.num_layers):
        raise ShapeMismatch(f"layer {args.layer} out of range (L={config.num_layers})")
    if not (0 <= args.head < config.num_heads):
        raise ShapeMismatch(f"head {args.head} out of range (H={config.num_heads})")
    result = model_mod.forward(task, params, config, capture_attention=True)
    amap = next(m for m in result.attention
                if m.layer == args.layer and m.head == args.head)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        xcols = [f"x{i}" for i in range(task.d_x)]
        wcols = [f"w{j}" for j in range(task.n)]
        w.writerow(["query_index", "kind"] + xcols + wcols)
        allx = np.vstack([task.observed_x, task.target_x])
        for i in range(task.n + task.m):
            kind = "observed" if i < task.n else "target"
            w.writerow([i, kind] + [repr(float(v)) for v in allx[i]]
                       + [repr(float(v)) for v in amap.weights[i]])
    print(f"attention weights (layer {args.layer}, head {args.head}) -> {args.out}")
    return 0


def cmd_baseline(args) -> int:
    tasks = taskgen.read_dataset(args.dataset)
    effective = {"method": args.method, "dataset": args.dataset,
                 "shape_c": args.shape_c, "ridge": args.ridge, "power": args.power}
    _echo_config(effective)
    predictions = []
    for task in tasks:
        if args.method == "rbf":
            model = baseline_mod.rbf_fit(task.observed_x, task.observed_y,
                                         shape_c=args.shape_c, ridge=args.ridge)
            obs = baseline_mod.rbf_eval(model, task.observed_x)
            tgt = baseline_mod.rbf_eval(model, task.target_x)
        else:
            obs = baseline_mod.idw_eval(task.observed_x, task.observed_y,
                                        task.observed_x, power=args.power)
            tgt = baseline_mod.idw_eval(task.observed_x, task.observed_y,
                                        task.target_x, power=args.power)
        predictions.append((obs, tgt))
    metrics = trainer_mod.metrics_from_predictions(tasks, predictions)
    _write_metrics_csv(args.out, metrics, effective)
    if args.dump_predictions:
        _dump_predictions(args.dump_predictions, tasks, predictions, effective)
    print(f"{args.method}: mse_target={metrics['mse_target']:.6g} -> {args.out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint_path=args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="niert",
        description="Transformer-based scattered-data interpolation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="JSON run-config file")

    p = sub.add_parser("gen", help="generate a synthetic task dataset")
    common(p)
    p.add_argument("--family", choices=["expr", "gaussian"], default=None)
    p.add_argument("--dx", type=int, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--points", type=int, default=None, help="total points per task")
    p.add_argument("--n-min", type=int, default=None)
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--sigma-base", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train an interpolator")
    common(p)
    p.add_argument("--dataset", default=None, help="train from a JSONL dataset")
    p.add_argument("--family", choices=["expr", "gaussian"], default=None)
    p.add_argument("--dx", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--n-min", type=int, default=None)
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--sigma-base", type=float, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--loss-norm", choices=["L1", "L2"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--tasks-per-epoch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-decay", type=float, default=None)
    p.add_argument("--loss-targets-only", action="store_true")
    p.add_argument("--vanilla-attention", action="store_true")
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--oracle", action="store_true",
                   help="feed ground truth back as predictions")
    p.add_argument("--vanilla", action="store_true")
    p.add_argument("--dump-predictions", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="dump per-task predictions")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attn", help="export attention weights for one task")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--task-index", type=int, default=0)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--head", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("baseline", help="run a classical interpolation baseline")
    common(p)
    p.add_argument("--method", choices=["rbf", "idw"], required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--shape-c", type=float, default=1.0)
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--dump-predictions", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteLoss, NonFiniteValue) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SingularSystem as exc:
        print(f"error: {exc} (consider --ridge)", file=sys.stderr)
        return EXIT_MISMATCH
    except (ShapeMismatch, CheckpointMismatch, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
