"""HTTP inference service around a trained checkpoint.

Exposes prediction, attention export, classical baselines, and task
generation. Training and evaluation stay on the CLI: they are long-running,
file-producing batch jobs and do not map onto request/response calls.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import baseline as baseline_mod
from . import model as model_mod
from .errors import NiertError, ShapeMismatch
from .rng import RngStream
from .taskgen import InterpolationTask, generate_tasks, task_to_record
from .trainer import GEN_STREAM_BASE


class TaskRequest(BaseModel):
    observed_x: list[list[float]]
    observed_y: list[list[float]]
    target_x: list[list[float]]


class PredictResponse(BaseModel):
    target_pred: list[list[float]]
    observed_pred: list[list[float]]


class AttentionRequest(BaseModel):
    task: TaskRequest
    layer: int = Field(ge=0)
    head: int = Field(ge=0)


class AttentionResponse(BaseModel):
    layer: int
    head: int
    weights: list[list[float]]   # (n+m) rows over n observed columns


class BaselineRequest(BaseModel):
    task: TaskRequest
    shape_c: float = 1.0
    ridge: float = 0.0
    power: float = 2.0


class GenerateRequest(BaseModel):
    family: str = "gaussian"
    d_x: int = 1
    count: int = Field(default=1, ge=1, le=1024)
    seed: int = 0
    num_points: Optional[int] = None
    n_min: Optional[int] = None
    n_max: Optional[int] = None
    sigma_base: Optional[float] = None


def _task_from_request(req: TaskRequest) -> InterpolationTask:
    obs_x = np.asarray(req.observed_x, dtype=np.float64)
    obs_y = np.asarray(req.observed_y, dtype=np.float64)
    tgt_x = np.asarray(req.target_x, dtype=np.float64)
    if obs_x.ndim != 2 or obs_y.ndim != 2 or tgt_x.ndim != 2:
        raise ShapeMismatch("points must be 2-d arrays")
    if obs_x.shape[0] != obs_y.shape[0]:
        raise ShapeMismatch("observed_x and observed_y row counts differ")
    task = InterpolationTask(
        observed_x=obs_x, observed_y=obs_y, target_x=tgt_x,
        target_y=np.zeros((tgt_x.shape[0], obs_y.shape[1])),
        source_id="request")
    task.validate()
    return task


def create_app(checkpoint_path: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="niert", version="0.1.0")
    state = {"config": None, "params": None, "checkpoint": checkpoint_path}
    if checkpoint_path is not None:
        config, params, _ = model_mod.load_checkpoint(checkpoint_path, trainable=False)
        state["config"], state["params"] = config, params

    def require_model():
        if state["params"] is None:
            raise HTTPException(status_code=503, detail="no checkpoint loaded")
        return state["config"], state["params"]

    @app.exception_handler(NiertError)
    async def on_niert_error(request, exc):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health")
    def health():
        return {"status": "ok", "model_loaded": state["params"] is not None,
                "checkpoint": state["checkpoint"]}

    @app.post("/predict", response_model=PredictResponse)
    def predict(req: TaskRequest):
        config, params = require_model()
        task = _task_from_request(req)
        pred = model_mod.forward(task, params, config).predictions.value
        return PredictResponse(observed_pred=pred[:task.n].tolist(),
                               target_pred=pred[task.n:].tolist())

    @app.post("/attention", response_model=AttentionResponse)
    def attention(req: AttentionRequest):
        config, params = require_model()
        if req.layer >= config.num_layers or req.head >= config.num_heads:
            raise HTTPException(status_code=422, detail="layer or head out of range")
        task = _task_from_request(req.task)
        result = model_mod.forward(task, params, config, capture_attention=True)
        amap = next(m for m in result.attention
                    if m.layer == req.layer and m.head == req.head)
        return AttentionResponse(layer=req.layer, head=req.head,
                                 weights=amap.weights.tolist())

    @app.post("/baseline/{method}", response_model=PredictResponse)
    def baseline(method: str, req: BaselineRequest):
        if method not in ("rbf", "idw"):
            raise HTTPException(status_code=404, detail=f"unknown method {method!r}")
        task = _task_from_request(req.task)
        if method == "rbf":
            fitted = baseline_mod.rbf_fit(task.observed_x, task.observed_y,
                                          shape_c=req.shape_c, ridge=req.ridge)
            obs = baseline_mod.rbf_eval(fitted, task.observed_x)
            tgt = baseline_mod.rbf_eval(fitted, task.target_x)
        else:
            obs = baseline_mod.idw_eval(task.observed_x, task.observed_y,
                                        task.observed_x, power=req.power)
            tgt = baseline_mod.idw_eval(task.observed_x, task.observed_y,
                                        task.target_x, power=req.power)
        return PredictResponse(observed_pred=obs.tolist(), target_pred=tgt.tolist())

    @app.post("/generate")
    def generate(req: GenerateRequest):
        n_range = None
        if req.n_min is not None and req.n_max is not None:
            n_range = (req.n_min, req.n_max)
        tasks = generate_tasks(req.family, req.d_x, req.count,
                               RngStream(req.seed, GEN_STREAM_BASE),
                               num_points=req.num_points, n_range=n_range,
                               sigma_base=req.sigma_base)
        return {"tasks": [task_to_record(t) for t in tasks]}

    return app
