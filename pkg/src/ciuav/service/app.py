"""HTTP service around the pipeline and a long-running collector.

Paths in requests refer to the server's filesystem.
"""

from __future__ import annotations

import dataclasses
import threading
from contextlib import asynccontextmanager
from importlib.metadata import PackageNotFoundError, version

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import pipeline
from ..config import PlanSettings, parse_config
from ..core import compute_metrics
from ..dsp import HampelParams
from ..net.collector import Collector, UdpCollector
from ..synth import SceneConfig
from . import schemas


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def create_app() -> FastAPI:
    lock = threading.Lock()
    collector: dict[str, UdpCollector] = {}

    @asynccontextmanager
    async def lifespan(_app):
        yield
        server = collector.pop("active", None)
        if server is not None:
            server.stop()

    app = FastAPI(title="ciuav", version=_version(), lifespan=lifespan)

    def bad_request(exc: Exception) -> HTTPException:
        return HTTPException(status_code=422, detail=str(exc))

    @app.get("/health", response_model=schemas.Health)
    def health():
        return schemas.Health(version=_version())

    @app.post("/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        try:
            if req.config_text:
                scene, plan = parse_config(req.config_text, "<request>")
            else:
                scene, plan = SceneConfig(), PlanSettings()
            if req.frames_per_point is not None:
                plan = dataclasses.replace(plan, frames_per_point=req.frames_per_point)
            return pipeline.generate_to(scene, plan, req.out_path, req.spike_rate, req.spike_gain, req.seed)
        except (ValueError, OSError) as exc:
            raise bad_request(exc) from None

    @app.post("/preprocess", response_model=schemas.PreprocessResponse)
    def preprocess(req: schemas.PreprocessRequest):
        try:
            hp = HampelParams(window_half=req.window_half, k_mad=req.k_mad)
            return pipeline.preprocess_to(req.in_path, req.out_path, req.dac, req.hampel, hp)
        except (ValueError, OSError) as exc:
            raise bad_request(exc) from None

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        opts = pipeline.TrainOptions(
            subsets=tuple(req.subsets),
            fractions=tuple(req.fractions),
            epochs=req.epochs,
            batch_size=req.batch_size,
            lr=req.lr,
            task_sampling=req.task_sampling,
            feature_dim=req.feature_dim,
            hidden_dims=tuple(req.hidden_dims),
            lambda_s=req.lambda_s,
            lambda_v=req.lambda_v,
            dac=req.dac,
            hampel=req.hampel,
        )
        try:
            return pipeline.train_to(req.data_path, req.out_dir, opts, req.seed)
        except (ValueError, OSError) as exc:
            raise bad_request(exc) from None
        except RuntimeError as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from None

    @app.post("/evaluate", response_model=schemas.MetricsResponse)
    def evaluate(req: schemas.EvaluateRequest):
        try:
            report = pipeline.evaluate_to(req.model_path, req.data_path, req.mask, req.out_path, req.dac, req.hampel)
        except (ValueError, OSError) as exc:
            raise bad_request(exc) from None
        return report.to_json()

    @app.post("/metrics", response_model=schemas.MetricsResponse)
    def metrics(req: schemas.MetricsRequest):
        try:
            return compute_metrics(np.array(req.predictions), np.array(req.truths)).to_json()
        except ValueError as exc:
            raise bad_request(exc) from None

    @app.post("/collector/start", response_model=schemas.CollectorAddress)
    def collector_start(req: schemas.CollectorStartRequest):
        with lock:
            if "active" in collector:
                raise HTTPException(status_code=409, detail="a collector is already running")
            try:
                server = UdpCollector(Collector(req.out_path, req.expected_sensors), (req.host, req.port)).start()
            except OSError as exc:
                raise bad_request(exc) from None
            collector["active"] = server
            host, port = server.address
        return schemas.CollectorAddress(host=host, port=port)

    @app.get("/collector/status")
    def collector_status() -> dict:
        with lock:
            server = collector.get("active")
        if server is None:
            raise HTTPException(status_code=404, detail="no collector running")
        return server.collector.snapshot()

    @app.post("/collector/stop")
    def collector_stop() -> dict:
        with lock:
            server = collector.pop("active", None)
        if server is None:
            raise HTTPException(status_code=404, detail="no collector running")
        return server.stop()

    return app


app = create_app()
