"""Synthetic interpolation-task generators and dataset serialization.

Two function families are provided: random mathematical expression trees
(continuous operators only, values normalized into [0,1] and scaled by a
random factor in [0.9,1]) and sums of K random Gaussian bumps for
high-dimensional tasks. Generation is a pure function of the RngStream, so
datasets regenerate identically from (seed, stream_id, config).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (DegenerateFunction, FormatError, NonFiniteValue,
                     RejectedFunction, ShapeMismatch)
from .rng import RngStream

# Un-normalized operator weights for expression sampling.
OPERATOR_WEIGHTS = {
    "add": 10, "mul": 10, "sub": 5,
    "square": 4, "cube": 2,
    "exp": 4, "sin": 4, "cos": 4,
}
BINARY_OPS = ("add", "mul", "sub")
UNARY_OPS = ("square", "cube", "exp", "sin", "cos")

MAX_NONLEAF_NODES = 5
VARIABLE_LEAF_PROB = 0.8
CONSTANT_RANGE = (1.0, 5.0)
GAIN_RANGE = (0.9, 1.0)
MIN_FINITE_FRACTION = 0.9
MAX_SAMPLE_ATTEMPTS = 100

# Gaussian-sum width bases keyed by dimension.
GAUSSIAN_SIGMA_BASE = {10: 1.0, 20: 2.0, 30: 4.0}
GAUSSIAN_COMPONENTS = 5


@dataclass(frozen=True)
class ExprNode:
    """Expression-tree node: operator, variable(index) or constant(value)."""

    kind: str
    children: tuple = ()
    index: int = 0
    value: float = 0.0

    def arity(self) -> int:
        if self.kind in BINARY_OPS:
            return 2
        if self.kind in UNARY_OPS:
            return 1
        return 0


@dataclass
class InterpolationTask:
    observed_x: np.ndarray   # (n, d_x)
    observed_y: np.ndarray   # (n, d_y)
    target_x: np.ndarray     # (m, d_x)
    target_y: np.ndarray     # (m, d_y), held-out ground truth
    source_id: str = ""

    @property
    def n(self) -> int:
        return self.observed_x.shape[0]

    @property
    def m(self) -> int:
        return self.target_x.shape[0]

    @property
    def d_x(self) -> int:
        return self.observed_x.shape[1]

    @property
    def d_y(self) -> int:
        return self.observed_y.shape[1]

    def validate(self):
        for arr in (self.observed_x, self.observed_y, self.target_x, self.target_y):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"task {self.source_id!r} contains NaN/inf")
        if self.n < 1 or self.m < 1:
            raise ShapeMismatch("task needs at least one observed and one target point")
        allx = np.vstack([self.observed_x, self.target_x])
        if np.unique(allx, axis=0).shape[0] != allx.shape[0]:
            raise ShapeMismatch("duplicate x between observed and target points")


# --- expression family ----------------------------------------------------

def sample_expression(d_x: int, rng: RngStream) -> ExprNode:
    """Random expression tree with at most 5 operator nodes.

    Operators are drawn from OPERATOR_WEIGHTS; each leaf is a variable with
    probability 0.8, otherwise a constant drawn from U(1,5).
    """
    gen = rng.generator()
    names = list(OPERATOR_WEIGHTS)
    probs = np.array([OPERATOR_WEIGHTS[k] for k in names], dtype=np.float64)
    probs /= probs.sum()
    budget = [int(gen.integers(1, MAX_NONLEAF_NODES + 1))]

    def leaf():
        if gen.random() < VARIABLE_LEAF_PROB:
            return ExprNode("variable", index=int(gen.integers(d_x)))
        return ExprNode("constant", value=float(gen.uniform(*CONSTANT_RANGE)))

    def build(depth):
        expand = budget[0] > 0 and (depth == 0 or gen.random() < 0.5)
        if not expand:
            return leaf()
        budget[0] -= 1
        kind = names[int(gen.choice(len(names), p=probs))]
        n_children = 2 if kind in BINARY_OPS else 1
        return ExprNode(kind, children=tuple(build(depth + 1)
                                             for _ in range(n_children)))

    return build(0)


def eval_expression(node: ExprNode, x: np.ndarray) -> np.ndarray:
    """Evaluate a tree on points x of shape (N, d_x); overflow yields inf."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _eval(node, x)


def _eval(node, x):
    k = node.kind
    if k == "variable":
        return x[:, node.index].copy()
    if k == "constant":
        return np.full(x.shape[0], node.value)
    vals = [_eval(c, x) for c in node.children]
    if k == "add":
        return vals[0] + vals[1]
    if k == "sub":
        return vals[0] - vals[1]
    if k == "mul":
        return vals[0] * vals[1]
    if k == "square":
        return vals[0] ** 2
    if k == "cube":
        return vals[0] ** 3
    if k == "exp":
        return np.exp(vals[0])
    if k == "sin":
        return np.sin(vals[0])
    if k == "cos":
        return np.cos(vals[0])
    raise ShapeMismatch(f"unknown node kind {k!r}")


def skeleton_key(node: ExprNode) -> str:
    """Canonical string of the operator tree with constant values stripped."""
    if node.kind == "variable":
        return f"x{node.index}"
    if node.kind == "constant":
        return "C"
    return f"{node.kind}({','.join(skeleton_key(c) for c in node.children)})"


def count_operators(node: ExprNode, counts: Optional[dict] = None) -> dict:
    if counts is None:
        counts = {k: 0 for k in OPERATOR_WEIGHTS}
    if node.kind in OPERATOR_WEIGHTS:
        counts[node.kind] += 1
    for c in node.children:
        count_operators(c, counts)
    return counts


@dataclass
class CalibratedFunction:
    """An expression rescaled so probe values land in [0, gain] ⊆ [0, 1]."""

    expr: ExprNode
    offset: float
    scale: float
    gain: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raw = eval_expression(self.expr, x)
        return self.gain * (raw - self.offset) * self.scale


def normalize_function(expr: ExprNode, probe: np.ndarray,
                       rng: RngStream) -> CalibratedFunction:
    """Affine-rescale an expression into [0,1] on the probe, times U(0.9,1)."""
    raw = eval_expression(expr, probe)
    finite = raw[np.isfinite(raw)]
    if finite.size < MIN_FINITE_FRACTION * raw.size:
        raise NonFiniteValue("function non-finite on more than 10% of probe points")
    lo, hi = float(finite.min()), float(finite.max())
    if hi - lo < 1e-9:
        raise DegenerateFunction("constant function on the probe")
    gain = float(rng.generator().uniform(*GAIN_RANGE))
    return CalibratedFunction(expr, offset=lo, scale=1.0 / (hi - lo), gain=gain)


# --- Gaussian-sum family ---------------------------------------------------

@dataclass
class GaussianSumFunction:
    """Sum of K Gaussian bumps: sum_k A_k exp(-0.5 |x-c_k|^2 / sigma_k^2)."""

    amplitudes: np.ndarray   # (K,)
    centers: np.ndarray      # (K, d_x)
    sigmas: np.ndarray       # (K,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        d2 = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return (self.amplitudes * np.exp(-0.5 * d2 / self.sigmas ** 2)).sum(axis=1)


def sample_gaussian_sum(d_x: int, rng: RngStream,
                        sigma_base: Optional[float] = None,
                        num_components: int = GAUSSIAN_COMPONENTS) -> GaussianSumFunction:
    if sigma_base is None:
        sigma_base = GAUSSIAN_SIGMA_BASE.get(d_x)
        if sigma_base is None:
            raise ShapeMismatch(
                f"no default width for d_x={d_x}; pass sigma_base explicitly")
    gen = rng.generator()
    return GaussianSumFunction(
        amplitudes=gen.uniform(-1.0, 1.0, size=num_components),
        centers=gen.uniform(-1.0, 1.0, size=(num_components, d_x)),
        sigmas=gen.uniform(sigma_base, 2.0 * sigma_base, size=num_components),
    )


# --- task sampling ----------------------------------------------------------

def _split_points(x, y, n_range, gen, source_id):
    n = int(gen.integers(n_range[0], n_range[1] + 1))
    perm = gen.permutation(x.shape[0])
    obs, tgt = perm[:n], perm[n:]
    return InterpolationTask(observed_x=x[obs], observed_y=y[obs],
                             target_x=x[tgt], target_y=y[tgt],
                             source_id=source_id)


def sample_task(f, num_points: int, n_range: tuple[int, int], d_x: int,
                rng: RngStream, source_id: str = "") -> InterpolationTask:
    """Scatter points in [-1,1]^d, evaluate f, split into observed/targets.

    Draws with any NaN/inf value (or duplicate x) are retried; after 100
    consecutive invalid draws the function is rejected.
    """
    if num_points <= n_range[1]:
        raise ShapeMismatch("num_points must exceed the observed-count upper bound")
    gen = rng.generator()
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        x = gen.uniform(-1.0, 1.0, size=(num_points, d_x))
        y = np.asarray(f(x), dtype=np.float64).reshape(num_points, -1)
        if not np.all(np.isfinite(y)):
            continue
        if np.unique(x, axis=0).shape[0] != num_points:
            continue
        return _split_points(x, y, n_range, gen, source_id)
    raise RejectedFunction(
        f"{MAX_SAMPLE_ATTEMPTS} consecutive invalid samples for {source_id!r}")


@dataclass
class GenerationStats:
    tasks: int = 0
    attempts: int = 0
    rejections: int = 0
    skeletons: set = field(default_factory=set)

    @property
    def rejection_rate(self) -> float:
        return self.rejections / self.attempts if self.attempts else 0.0


def generate_expression_task(d_x: int, num_points: int, n_range, rng: RngStream,
                             source_id: str = "",
                             exclude_skeletons: Optional[set] = None,
                             stats: Optional[GenerationStats] = None) -> InterpolationTask:
    """Sample one expression-family task.

    The normalization probe is the same point set the task uses, so observed
    and target values are guaranteed to lie in [0, 1].
    """
    stats = stats if stats is not None else GenerationStats()
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        stream = rng.child(1 + attempt)
        gen = stream.generator()
        expr = sample_expression(d_x, stream.child(500_000))
        stats.attempts += 1
        if exclude_skeletons and skeleton_key(expr) in exclude_skeletons:
            stats.rejections += 1
            continue
        x = gen.uniform(-1.0, 1.0, size=(num_points, d_x))
        raw = eval_expression(expr, x)
        if not np.all(np.isfinite(raw)) or np.unique(x, axis=0).shape[0] != num_points:
            stats.rejections += 1
            continue
        try:
            calibrated = normalize_function(expr, x, stream.child(600_000))
        except (DegenerateFunction, NonFiniteValue):
            stats.rejections += 1
            continue
        y = calibrated(x).reshape(num_points, 1)
        task = _split_points(x, y, n_range, gen, source_id)
        stats.tasks += 1
        stats.skeletons.add(skeleton_key(expr))
        return task
    raise RejectedFunction(f"no valid expression task after {MAX_SAMPLE_ATTEMPTS} attempts")


def default_num_points(family: str, d_x: int) -> int:
    """Total scattered points per task: 256 for 1D expressions, 512 for 2D-4D,
    256 (64 observed + 192 targets) for the Gaussian-sum family."""
    if family == "expr":
        return 256 if d_x == 1 else 512
    return 256


def default_n_range(family: str) -> tuple[int, int]:
    return (5, 50) if family == "expr" else (64, 64)


def generate_tasks(family: str, d_x: int, count: int, rng: RngStream,
                   num_points: Optional[int] = None,
                   n_range: Optional[tuple[int, int]] = None,
                   sigma_base: Optional[float] = None,
                   exclude_skeletons: Optional[set] = None,
                   stats: Optional[GenerationStats] = None) -> list[InterpolationTask]:
    """Generate `count` tasks; task i depends only on rng.child(i * stride)."""
    if family not in ("expr", "gaussian"):
        raise ShapeMismatch(f"unknown family {family!r}")
    num_points = num_points or default_num_points(family, d_x)
    n_range = n_range or default_n_range(family)
    stats = stats if stats is not None else GenerationStats()
    tasks = []
    for i in range(count):
        stream = rng.child(i * 1_000_000)
        if family == "expr":
            task = generate_expression_task(
                d_x, num_points, n_range, stream, source_id=f"expr-{i:06d}",
                exclude_skeletons=exclude_skeletons, stats=stats)
        else:
            f = sample_gaussian_sum(d_x, stream.child(1), sigma_base=sigma_base)
            task = sample_task(f, num_points, n_range, d_x, stream.child(2),
                               source_id=f"gauss-{i:06d}")
            stats.attempts += 1
            stats.tasks += 1
        task.validate()
        tasks.append(task)
    return tasks


# --- serialization ----------------------------------------------------------

_HEADER = {"format": "niert-tasks", "version": 1}


def task_to_record(task: InterpolationTask) -> dict:
    return {
        "d_x": task.d_x,
        "d_y": task.d_y,
        "source_id": task.source_id,
        "observed": [task.observed_x.tolist(), task.observed_y.tolist()],
        "targets": [task.target_x.tolist()],
        "truth": [task.target_y.tolist()],
    }


def task_from_record(rec: dict) -> InterpolationTask:
    return InterpolationTask(
        observed_x=np.asarray(rec["observed"][0], dtype=np.float64),
        observed_y=np.asarray(rec["observed"][1], dtype=np.float64),
        target_x=np.asarray(rec["targets"][0], dtype=np.float64),
        target_y=np.asarray(rec["truth"][0], dtype=np.float64),
        source_id=rec["source_id"],
    )


def write_dataset(tasks, path):
    """One JSON header line, then one self-describing JSON object per task.

    Floats are emitted as their shortest round-trip representation, so
    read(write(tasks)) is bitwise identical and re-serialization is a fixpoint.
    """
    for task in tasks:
        task.validate()
    with open(path, "w") as fh:
        fh.write(json.dumps(_HEADER) + "\n")
        for task in tasks:
            fh.write(json.dumps(task_to_record(task)) + "\n")


def read_dataset(path) -> list[InterpolationTask]:
    tasks = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(lineno, str(exc)) from exc
            if lineno == 1:
                if rec.get("format") != _HEADER["format"]:
                    raise FormatError(1, "missing niert-tasks header")
                continue
            try:
                tasks.append(task_from_record(rec))
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise FormatError(lineno, f"malformed task record: {exc}") from exc
    return tasks
