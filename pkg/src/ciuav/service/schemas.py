"""Request and response models for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class Health(BaseModel):
    status: str = "ok"
    version: str


class GenerateRequest(BaseModel):
    out_path: str
    config_text: str | None = Field(None, description="scene config in the key = value format")
    frames_per_point: int | None = Field(None, ge=1)
    spike_rate: float = Field(0.0, ge=0.0, le=1.0)
    spike_gain: float = 10.0
    seed: int | None = None


class GenerateResponse(BaseModel):
    N: int
    S: int
    f: int
    spikes: int
    out: str
    spike_log: str
    config_fingerprint: str


class PreprocessRequest(BaseModel):
    in_path: str
    out_path: str
    dac: bool = True
    hampel: bool = True
    window_half: int = Field(10, ge=1)
    k_mad: float = Field(3.0, gt=0.0)


class PreprocessResponse(BaseModel):
    N: int
    S: int
    f: int
    provenance: list[str]
    outliers: int
    out: str
    config_fingerprint: str


class TrainRequest(BaseModel):
    data_path: str
    out_dir: str
    subsets: list[str] = ["1", "3", "1-3", "1-2-3"]
    fractions: list[float] = [1.0]
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    task_sampling: str = Field("round-robin", pattern="^(round-robin|proportional)$")
    feature_dim: int = Field(128, ge=1)
    hidden_dims: list[int] = [256, 256]
    lambda_s: float = Field(0.01, ge=0.0)
    lambda_v: float = Field(0.1, ge=0.0)
    dac: bool = True
    hampel: bool = True
    seed: int = 0


class TrainResponse(BaseModel):
    model: str
    per_task: dict[str, float] = Field(description="LMSE per task on its own training subset")
    final_loss: float
    config_fingerprint: str


class EvaluateRequest(BaseModel):
    model_path: str
    data_path: str
    mask: str = "1-2-3"
    dac: bool = True
    hampel: bool = True
    out_path: str | None = None


class MetricsResponse(BaseModel):
    mae_m: float
    lmse_m2: float
    r2: float | None
    cdf: list[tuple[float, float]]


class MetricsRequest(BaseModel):
    predictions: list[tuple[float, float, float]] = Field(min_length=1)
    truths: list[tuple[float, float, float]] = Field(min_length=1)


class CollectorStartRequest(BaseModel):
    out_path: str
    host: str = "127.0.0.1"
    port: int = Field(0, ge=0, le=65535)
    expected_sensors: int = Field(3, ge=1)


class CollectorAddress(BaseModel):
    host: str
    port: int


class ErrorResponse(BaseModel):
    detail: str
