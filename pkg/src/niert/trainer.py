"""Training loop, evaluation metrics, and fine-tuning.

One optimizer step per batch of tasks: the batch gradient is the gradient of
the summed per-task, per-point error divided by the total point count, so the
learning rate transfers across batch sizes. Everything is deterministic given
(seed, configs): rerunning a training produces a bitwise-identical checkpoint.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as model_mod
from .errors import CheckpointMismatch, NonFiniteLoss, ShapeMismatch
from .model import ModelConfig, forward, init_params, loss
from .numerics import AdamState, adam_step, backprop_gradients, flatten_params, unflatten_params
from .rng import RngStream
from .taskgen import InterpolationTask, generate_tasks, read_dataset

INIT_STREAM = 0
GEN_STREAM_BASE = 1 << 32


def max_workers() -> int:
    """Worker cap for parallel evaluation, from NIERT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("NIERT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    tasks_per_epoch: int = 2048
    lr: float = 1e-4
    lr_decay: float = 1.0
    loss_norm: str = "L2"
    seed: int = 0
    eval_every: int = 0                 # 0 disables mid-training evaluation
    source: dict | str = field(default_factory=lambda: {"family": "gaussian", "d_x": 1})
    loss_targets_only: bool = False
    vanilla_attention: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ShapeMismatch("epochs must be >= 0 and batch_size >= 1")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1):
            raise ShapeMismatch("need lr > 0 and 0 < lr_decay <= 1")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)   # (epoch, metrics) pairs
    wall_time: float = 0.0
    checkpoint_path: str = ""
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


class TaskSource:
    """Deterministic batch supplier, either generated on the fly or from a file."""

    def __init__(self, source: dict | str | list, seed: int):
        if isinstance(source, str):
            self.tasks = read_dataset(source)
            self.spec = None
        elif isinstance(source, list):
            self.tasks = source
            self.spec = None
        else:
            self.tasks = None
            self.spec = dict(source)
        self.seed = seed

    def batch(self, start_index: int, size: int) -> list[InterpolationTask]:
        if self.tasks is not None:
            n = len(self.tasks)
            return [self.tasks[(start_index + j) % n] for j in range(size)]
        spec = self.spec
        rng = RngStream(self.seed, GEN_STREAM_BASE).child(start_index * 1_000_000)
        return generate_tasks(
            spec["family"], spec["d_x"], size, rng,
            num_points=spec.get("num_points"),
            n_range=tuple(spec["n_range"]) if spec.get("n_range") else None,
            sigma_base=spec.get("sigma_base"))


def _batch_gradient(tasks, params, model_config, train_config):
    """Gradient of the summed error over a batch, averaged per point.

    Returns (flat gradient, mean per-point loss)."""
    gsum = None
    total = 0
    j_total = 0.0
    for task in tasks:
        out = forward(task, params, model_config,
                      vanilla=train_config.vanilla_attention)
        points = task.m if train_config.loss_targets_only else task.n + task.m
        count = points * task.d_y
        l_sum = loss(out.predictions, task, norm=train_config.loss_norm,
                     targets_only=train_config.loss_targets_only) * float(count)
        if not np.isfinite(l_sum.value):
            raise NonFiniteLoss(task.source_id)
        grads = backprop_gradients(l_sum, params)
        flat = np.concatenate([grads[name].ravel() for name in params])
        gsum = flat if gsum is None else gsum + flat
        total += count
        j_total += float(l_sum.value)
    return gsum / total, j_total / total


def train(model_config: ModelConfig, train_config: TrainConfig,
          init: dict | None = None, eval_tasks=None,
          epoch_callback=None) -> tuple[dict, TrainReport]:
    """Run Algorithm-1-style training; returns (params, report).

    `init` is an optional parameter dict (e.g. from a loaded checkpoint);
    otherwise parameters are freshly initialized from the seed.
    """
    start = time.time()
    if init is None:
        params = init_params(model_config, RngStream(train_config.seed, INIT_STREAM))
    else:
        expected = init_params(model_config, RngStream(0))
        if set(expected) != set(init) or any(
                expected[k].shape != init[k].shape for k in expected):
            raise CheckpointMismatch("init parameters do not match model config")
        params = init
    source = TaskSource(train_config.source, train_config.seed)
    report = TrainReport(metadata={
        "loss_targets_only": train_config.loss_targets_only,
        "vanilla_attention": train_config.vanilla_attention,
        "loss_norm": train_config.loss_norm,
        "seed": train_config.seed,
    })

    flat = flatten_params(params)
    state = AdamState.init(flat.size, lr=train_config.lr,
                           beta1=train_config.beta1, beta2=train_config.beta2,
                           eps=train_config.eps, decay_rate=train_config.lr_decay)
    num_batches = max(1, train_config.tasks_per_epoch // train_config.batch_size)
    for epoch in range(train_config.epochs):
        batch_losses = []
        for b in range(num_batches):
            start_index = epoch * num_batches * train_config.batch_size \
                + b * train_config.batch_size
            tasks = source.batch(start_index, train_config.batch_size)
            grad, batch_loss = _batch_gradient(tasks, params, model_config, train_config)
            flat = flatten_params(params)
            flat, state = adam_step(flat, grad, state)
            for name, arr in unflatten_params(flat, params).items():
                params[name].value = arr.copy()
            batch_losses.append(batch_loss)
        state.decay_lr()
        report.epoch_losses.append(float(np.mean(batch_losses)))
        if train_config.eval_every and eval_tasks is not None \
                and (epoch + 1) % train_config.eval_every == 0:
            metrics = evaluate(params, model_config, eval_tasks,
                               vanilla=train_config.vanilla_attention)
            report.eval_history.append([epoch + 1, metrics])
        if epoch_callback is not None:
            epoch_callback(epoch, report.epoch_losses[-1])
    report.wall_time = time.time() - start
    return params, report


def predict_tasks(params, model_config, tasks, vanilla=False):
    """Model predictions per task: list of (observed_pred, target_pred)."""
    def run(task):
        pred = forward(task, params, model_config, vanilla=vanilla).predictions.value
        return pred[:task.n], pred[task.n:]

    workers = max_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, tasks))
    return [run(t) for t in tasks]


def metrics_from_predictions(tasks, predictions, region_masks=None) -> dict:
    """MSE/MAE over target points (the accuracy definition), observed-point
    reconstruction error reported separately, and a per-bin breakdown by
    observed-point count."""
    tgt_sq, tgt_abs, obs_sq, obs_abs = [], [], [], []
    bins: dict[str, list] = {}
    region_abs = []
    for idx, (task, (obs_pred, tgt_pred)) in enumerate(zip(tasks, predictions)):
        t_err = tgt_pred - task.target_y
        o_err = obs_pred - task.observed_y
        tgt_sq.append(np.mean(t_err ** 2))
        tgt_abs.append(np.mean(np.abs(t_err)))
        obs_sq.append(np.mean(o_err ** 2))
        obs_abs.append(np.mean(np.abs(o_err)))
        label = _bin_label(task.n)
        bins.setdefault(label, []).append((np.mean(t_err ** 2), np.mean(np.abs(t_err))))
        if region_masks is not None:
            mask = np.asarray(region_masks[idx], dtype=bool)
            if mask.any():
                region_abs.append(np.mean(np.abs(t_err[mask])))
    out = {
        "mse_target": float(np.mean(tgt_sq)),
        "mae_target": float(np.mean(tgt_abs)),
        "mse_observed": float(np.mean(obs_sq)),
        "mae_observed": float(np.mean(obs_abs)),
        "bins": {label: {"mse_target": float(np.mean([v[0] for v in vals])),
                         "mae_target": float(np.mean([v[1] for v in vals])),
                         "tasks": len(vals)}
                 for label, vals in sorted(bins.items())},
    }
    if region_masks is not None:
        out["region_mae"] = float(np.mean(region_abs)) if region_abs else 0.0
    return out


def _bin_label(n: int) -> str:
    lo = (n // 10) * 10
    return f"{lo}-{lo + 9}"


def evaluate(params, model_config, tasks, region_masks=None, vanilla=False) -> dict:
    preds = predict_tasks(params, model_config, tasks, vanilla=vanilla)
    return metrics_from_predictions(tasks, preds, region_masks=region_masks)


@dataclass
class ValueNormalization:
    """Invertible per-channel affine map applied to y before fine-tuning."""

    scale: float = 1.0
    shift: float = 0.0

    def apply(self, y: np.ndarray) -> np.ndarray:
        return y * self.scale + self.shift

    def invert(self, y: np.ndarray) -> np.ndarray:
        return (y - self.shift) / self.scale


def normalize_tasks(tasks, normalization: ValueNormalization):
    return [InterpolationTask(observed_x=t.observed_x,
                              observed_y=normalization.apply(t.observed_y),
                              target_x=t.target_x,
                              target_y=normalization.apply(t.target_y),
                              source_id=t.source_id)
            for t in tasks]


def finetune(checkpoint_path: str, train_config: TrainConfig,
             normalization: ValueNormalization | None = None,
             eval_tasks=None) -> tuple[ModelConfig, dict, TrainReport]:
    """Continue training from a checkpoint on a new source, with the new
    source's values mapped through the affine normalization first."""
    config, params, _ = model_mod.load_checkpoint(checkpoint_path)
    normalization = normalization or ValueNormalization()
    cfg = train_config
    if normalization.scale != 1.0 or normalization.shift != 0.0:
        if not isinstance(cfg.source, str):
            raise ShapeMismatch("normalized fine-tuning requires a dataset source")
        from dataclasses import replace
        cfg = replace(cfg, source=normalize_tasks(read_dataset(cfg.source),
                                                  normalization))
    params, report = train(config, cfg, init=params, eval_tasks=eval_tasks)
    report.metadata["finetuned_from"] = checkpoint_path
    report.metadata["normalization"] = asdict(normalization)
    return config, params, report


def evaluate_denormalized(params, model_config, tasks,
                          normalization: ValueNormalization,
                          vanilla=False) -> dict:
    """Evaluate on original-scale values: predictions are de-normalized
    before metrics (the tasks here carry original, un-normalized y)."""
    normalized = normalize_tasks(tasks, normalization)
    preds = predict_tasks(params, model_config, normalized, vanilla=vanilla)
    denorm = [(normalization.invert(o), normalization.invert(t)) for o, t in preds]
    return metrics_from_predictions(tasks, denorm)
