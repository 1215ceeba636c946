"""Request and response bodies for the HTTP endpoints."""

from __future__ import annotations

from pydantic import BaseModel

from oodkit.config import RunConfigModel, SynthJobModel


class HealthResponse(BaseModel):
    status: str
    version: str


class FitRequest(BaseModel):
    config: RunConfigModel


class FitResponse(BaseModel):
    bank_path: str
    num_classes: int
    stride_count: int
    distance: str
    cells: dict[str, dict]
    global_threshold: float
    logits_thresholds: dict[str, float]


class EvalRequest(BaseModel):
    config: RunConfigModel


class EvalResponse(BaseModel):
    csv_path: str
    report_paths: list[str]
    rows: list[dict]


class SweepRequest(BaseModel):
    config: RunConfigModel


class SweepResponse(BaseModel):
    sweep_csv: str
    front_csv: str
    n_rows: int
    n_front: int
    n_failed_rows: int
    all_failed: bool


class SynthRequest(BaseModel):
    out: str
    config: SynthJobModel


class SynthResponse(BaseModel):
    manifest_path: str
    name: str
    kind: str
    num_images: int
