"""FastAPI service wrapping the experiment harness.

The CLI is a thin client of these endpoints (in-process by default); a
long-running server makes the same runs available to multiple clients.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import UsageError
from ..harness.config import OPT_PRESETS, build_config
from ..harness.runner import execute_run
from ..harness.suites import run_suite
from ..scheduler import cost_model_for_spec, predict_throughput
from .schemas import (CheckModel, MetricsModel, PresetInfo, RunRequest,
                      RunResponse, SimRequest, SimResponse, SimRow,
                      SuiteRequest, SuiteResponse)


def create_app() -> FastAPI:
    app = FastAPI(title="zo2lab", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.get("/presets", response_model=list[PresetInfo])
    def presets() -> list[PresetInfo]:
        return [PresetInfo(name=name, n_blocks=s.n_blocks, dim=s.dim,
                           n_heads=s.n_heads, vocab=s.vocab, seq_len=s.seq_len)
                for name, s in OPT_PRESETS.items()]

    @app.post("/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        try:
            cfg = build_config(req.config_file, req.overrides)
            report = execute_run(cfg, write_artifacts=req.write_artifacts)
        except UsageError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        out = str(cfg.resolved_output_dir()) if req.write_artifacts else None
        return RunResponse(metrics=MetricsModel(**report.to_json()), output_dir=out)

    @app.post("/suite", response_model=SuiteResponse)
    def suite(req: SuiteRequest) -> SuiteResponse:
        try:
            rep = run_suite(req.name, req.output_dir)
        except UsageError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return SuiteResponse(
            name=rep.name, rows=rep.rows,
            checks=[CheckModel(name=c.name, passed=c.passed, detail=c.detail)
                    for c in rep.checks],
            csv_path=rep.csv_path, all_passed=rep.all_passed)

    @app.post("/sim", response_model=SimResponse)
    def sim(req: SimRequest) -> SimResponse:
        if req.preset not in OPT_PRESETS:
            raise HTTPException(
                status_code=422,
                detail=f"unknown preset {req.preset!r}; "
                       f"choose from {sorted(OPT_PRESETS)}")
        spec = OPT_PRESETS[req.preset]
        allowed = {"flops_per_sec", "h2d_bytes_per_sec", "d2h_bytes_per_sec",
                   "latency", "alloc_latency", "amp_speedup"}
        bad = set(req.cost) - allowed
        if bad:
            raise HTTPException(status_code=422,
                                detail=f"unknown cost keys: {sorted(bad)}")
        cost = cost_model_for_spec(spec, req.batch_size, **req.cost)
        codec = None if req.codec == "none" else req.codec
        mezo = predict_throughput(spec, cost, "mezo", batch_size=req.batch_size)
        rows = [SimRow(mode="mezo", tokens_per_sec=mezo, ratio_vs_mezo=1.0)]
        for mode in ("zo2", "zo2-amp"):
            tps = predict_throughput(spec, cost, mode, batch_size=req.batch_size,
                                     k_slots=req.arena_slots, codec=codec)
            rows.append(SimRow(mode=mode, tokens_per_sec=tps,
                               ratio_vs_mezo=tps / mezo))
        return SimResponse(preset=req.preset, n_blocks=spec.n_blocks,
                           dim=spec.dim, n_heads=spec.n_heads,
                           seq_len=spec.seq_len, rows=rows)

    return app


app = create_app()
