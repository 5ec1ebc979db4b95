"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    config_file: str | None = None
    overrides: dict[str, str] = Field(default_factory=dict)
    write_artifacts: bool = True


class MetricsModel(BaseModel):
    config: dict
    losses: list[float]
    final_digest: str
    device_peak_bytes: int
    host_param_bytes: int
    memory_breakdown: dict[str, int]
    uploads: int
    offloads: int
    wire_bytes_up: int
    wire_bytes_down: int
    makespan_total_s: float
    makespan_mean_s: float
    tokens_per_sec_incl_warmup: float
    tokens_per_sec_excl_warmup: float
    wall_seconds: float


class RunResponse(BaseModel):
    metrics: MetricsModel
    output_dir: str | None = None


class SuiteRequest(BaseModel):
    name: Literal["equivalence", "ablation", "amp", "memory-scaling", "sweep"]
    output_dir: str = "runs"


class CheckModel(BaseModel):
    name: str
    passed: bool
    detail: str


class SuiteResponse(BaseModel):
    name: str
    rows: list[dict]
    checks: list[CheckModel]
    csv_path: str
    all_passed: bool


class SimRequest(BaseModel):
    preset: str
    batch_size: int = 1
    codec: Literal["none", "f16", "bf16", "f8"] = "none"
    arena_slots: int = 3
    cost: dict[str, float] = Field(default_factory=dict)


class SimRow(BaseModel):
    mode: str
    tokens_per_sec: float
    ratio_vs_mezo: float


class SimResponse(BaseModel):
    preset: str
    n_blocks: int
    dim: int
    n_heads: int
    seq_len: int
    rows: list[SimRow]


class PresetInfo(BaseModel):
    name: str
    n_blocks: int
    dim: int
    n_heads: int
    vocab: int
    seq_len: int
