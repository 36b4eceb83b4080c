"""The masked-token interpolation transformer.

Observed and target points share one embedding space: positions go through
Linear_x, known values through Linear_y, and missing target values are
replaced by a trainable mask vector. A stack of transformer layers with
*partial* self-attention (every query attends only to observed points)
encodes all points, and a pointwise MLP head reads out predicted values for
observed and target points alike.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, field

import numpy as np

from .autodiff import Tensor, concat, layer_norm, softmax
from .errors import CheckpointMismatch, ShapeMismatch
from .rng import RngStream
from .taskgen import InterpolationTask

CHECKPOINT_MAGIC = b"NIERT1\n"


@dataclass(frozen=True)
class ModelConfig:
    d_x: int = 1
    d_y: int = 1
    num_layers: int = 3
    d_model: int = 64
    num_heads: int = 4
    d_xemb: int = 0          # 0 -> 16 * d_x
    d_yemb: int = 16
    d_ff: int = 0            # 0 -> 4 * d_model
    loss_norm: str = "L2"

    def __post_init__(self):
        if self.d_xemb == 0:
            object.__setattr__(self, "d_xemb", 16 * self.d_x)
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.d_model % self.num_heads != 0:
            raise ShapeMismatch("d_model must be divisible by num_heads")
        if self.loss_norm not in ("L1", "L2"):
            raise ShapeMismatch(f"loss_norm must be L1 or L2, got {self.loss_norm!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class AttentionMap:
    """Effective attention of every query row over the attended columns."""

    layer: int
    head: int
    weights: np.ndarray   # (n+m, n) for partial attention


@dataclass
class ForwardResult:
    predictions: Tensor          # (n+m, d_y); observed rows first
    attention: list = field(default_factory=list)


def init_params(config: ModelConfig, rng: RngStream) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases,
    zero mask vector, identity layer norms."""
    gen = rng.generator()
    params: dict[str, Tensor] = {}

    def weight(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[name + ".w"] = Tensor(gen.uniform(-bound, bound, size=(fan_in, fan_out)),
                                     requires_grad=True)
        params[name + ".b"] = Tensor(np.zeros(fan_out), requires_grad=True)

    def norm(name, width):
        params[name + ".gain"] = Tensor(np.ones(width), requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(width), requires_grad=True)

    weight("linear_x", config.d_x, config.d_xemb)
    weight("linear_y", config.d_y, config.d_yemb)
    params["mask_y"] = Tensor(np.zeros(config.d_yemb), requires_grad=True)
    weight("w_in", config.d_xemb + config.d_yemb, config.d_model)
    for layer in range(config.num_layers):
        p = f"layer{layer}"
        for proj in ("wq", "wk", "wv", "wo"):
            weight(f"{p}.{proj}", config.d_model, config.d_model)
        norm(f"{p}.ln1", config.d_model)
        norm(f"{p}.ln2", config.d_model)
        weight(f"{p}.ffn1", config.d_model, config.d_ff)
        weight(f"{p}.ffn2", config.d_ff, config.d_model)
    weight("head1", config.d_model, config.d_ff)
    weight("head2", config.d_ff, config.d_y)
    return params


def _affine(x, params, name):
    return x @ params[name + ".w"] + params[name + ".b"]


def embed(task: InterpolationTask, params: dict[str, Tensor],
          config: ModelConfig) -> Tensor:
    """Initial point features: observed rows first, then target rows."""
    if task.d_x != config.d_x or task.d_y != config.d_y:
        raise ShapeMismatch(
            f"task dims ({task.d_x},{task.d_y}) vs config ({config.d_x},{config.d_y})")
    x_all = Tensor(np.vstack([task.observed_x, task.target_x]))
    ex = _affine(x_all, params, "linear_x")
    ey_obs = _affine(Tensor(task.observed_y), params, "linear_y")
    ey_tgt = Tensor(np.zeros((task.m, config.d_yemb))) + params["mask_y"]
    ey = concat([ey_obs, ey_tgt], axis=0)
    return _affine(concat([ex, ey], axis=1), params, "w_in")


def attention_heads(h: Tensor, params: dict[str, Tensor], layer: int,
                    config: ModelConfig, n_observed: int,
                    vanilla: bool = False):
    """Per-head attention over observed columns only (all columns if vanilla).

    Returns (mixed values (N, d_model) before the output projection,
    attention weights ndarray (H, N, n_attended)).
    """
    p = f"layer{layer}"
    num = h.shape[0]
    heads, dk = config.num_heads, config.d_head
    keys_src = h if vanilla else h[:n_observed]
    q = _affine(h, params, f"{p}.wq").reshape(num, heads, dk).transpose(1, 0, 2)
    k = _affine(keys_src, params, f"{p}.wk").reshape(-1, heads, dk).transpose(1, 0, 2)
    v = _affine(keys_src, params, f"{p}.wv").reshape(-1, heads, dk).transpose(1, 0, 2)
    logits = (q @ k.transpose(0, 2, 1)) / np.sqrt(dk)
    alpha = softmax(logits, axis=-1)            # (H, N, n_attended)
    mixed = (alpha @ v).transpose(1, 0, 2).reshape(num, config.d_model)
    return mixed, alpha.value


def transformer_layer(h: Tensor, params: dict[str, Tensor], layer: int,
                      config: ModelConfig, n_observed: int,
                      vanilla: bool = False):
    """Post-norm block: attention + residual + LN, then FFN + residual + LN."""
    p = f"layer{layer}"
    mixed, alpha = attention_heads(h, params, layer, config, n_observed, vanilla)
    attn_out = _affine(mixed, params, f"{p}.wo")
    h = layer_norm(h + attn_out, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    ff = _affine(_affine(h, params, f"{p}.ffn1").relu(), params, f"{p}.ffn2")
    h = layer_norm(h + ff, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
    return h, alpha


def forward(task: InterpolationTask, params: dict[str, Tensor],
            config: ModelConfig, capture_attention: bool = False,
            vanilla: bool = False) -> ForwardResult:
    """Predict values for all n+m points; observed rows are reconstructions."""
    h = embed(task, params, config)
    maps = []
    for layer in range(config.num_layers):
        h, alpha = transformer_layer(h, params, layer, config, task.n, vanilla)
        if capture_attention:
            maps.extend(AttentionMap(layer=layer, head=i, weights=alpha[i])
                        for i in range(config.num_heads))
    pred = _affine(_affine(h, params, "head1").relu(), params, "head2")
    return ForwardResult(predictions=pred, attention=maps)


def loss(predictions: Tensor, task: InterpolationTask, norm: str = "L2",
         targets_only: bool = False) -> Tensor:
    """Mean per-point, per-channel error over all points (or targets only)."""
    truth = np.vstack([task.observed_y, task.target_y])
    if predictions.shape != truth.shape:
        raise ShapeMismatch(f"predictions {predictions.shape} vs truth {truth.shape}")
    diff = predictions - Tensor(truth)
    if targets_only:
        diff = diff[task.n:]
    if norm == "L1":
        return diff.abs().mean()
    if norm == "L2":
        return diff.square().mean()
    raise ShapeMismatch(f"unknown norm {norm!r}")


# --- checkpoint container ----------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor],
                    extra: dict | None = None):
    """Magic line, JSON header (config + tensor manifest), then raw little-
    endian float64 tensor data in manifest order."""
    arrays = {name: np.ascontiguousarray(t.value if isinstance(t, Tensor) else t,
                                         dtype="<f8")
              for name, t in params.items()}
    header = {
        "config": asdict(config),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays.values():
            fh.write(a.tobytes())


def load_checkpoint(path, trainable: bool = True):
    """Returns (ModelConfig, params dict of Tensors, extra dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointMismatch(f"bad magic {magic!r}")
        header = json.loads(fh.readline().decode())
        try:
            config = ModelConfig(**header["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointMismatch(f"bad config header: {exc}") from exc
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointMismatch(f"truncated tensor {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params[entry["name"]] = Tensor(arr, requires_grad=trainable)
    expected = init_params(config, RngStream(0))
    if set(expected) != set(params) or any(
            expected[k].shape != params[k].shape for k in expected):
        raise CheckpointMismatch("tensor manifest does not match config shapes")
    return config, params, header.get("extra", {})
