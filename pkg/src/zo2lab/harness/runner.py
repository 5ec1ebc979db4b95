"""Experiment execution: one RunConfig in, one MetricsReport plus artifacts out.

Artifacts per run: metrics.json, timeline.jsonl (Chrome-trace field naming),
transfers.jsonl, and an appended summary.csv row (stable column order in
SUMMARY_COLUMNS).  Identical configs reproduce identical metrics except for
wall-clock fields.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import numpy as np

from ..model import TransformerWorkload, block_id, init_params
from ..numerics import ElemFormat, RngState
from ..runtime import Channel, OffloadRuntime
from ..scheduler import (build_iteration_dag, cost_model_for_spec,
                         module_param_counts, predict_throughput, run_schedule)
from ..zo2_engine import Zo2Engine
from ..zo_ref import RefEngine, ZOConfig, batch_for_step
from .config import RunConfig, build_config
from .data import gen_synthetic
from .metrics import SUMMARY_COLUMNS, MetricsReport, params_digest, write_jsonl

_CODEC_RATIO = {"none": 1.0, "f16": 0.5, "bf16": 0.5, "f8": 0.25}


def _zo_config(cfg: RunConfig) -> ZOConfig:
    return ZOConfig(eps=cfg.eps, lr=cfg.lr, steps=cfg.steps, seed=cfg.seed)


def _mezo_device_bytes(workload: TransformerWorkload, batch_size: int,
                       io_bytes: int) -> int:
    """All-resident peak: every parameter plus the live activation pair.

    The monolithic engine runs its two forwards sequentially, so at most one
    module's input and output coexist (vs. both signs at once block-wise).
    """
    params = workload.params
    total = sum(b.nbytes for _, b in params.buckets())
    acts = [workload.activation_bytes(m, batch_size)
            for m, _ in params.buckets()]
    peak_act = max(a + b for a, b in zip(acts, acts[1:])) if len(acts) > 1 else acts[0]
    return total + peak_act + io_bytes


def _execute_preset_sim(cfg: RunConfig, write_artifacts: bool) -> MetricsReport:
    """Byte/flop-counted simulation of a named model preset: predicted
    throughput and analytic memory, no parameters ever materialize."""
    spec = cfg.model_spec()
    cost = cost_model_for_spec(
        spec, cfg.batch_size,
        flops_per_sec=cfg.cost.flops_per_sec,
        h2d_bytes_per_sec=cfg.cost.h2d_bytes_per_sec,
        d2h_bytes_per_sec=cfg.cost.d2h_bytes_per_sec,
        latency=cfg.cost.latency_s,
        alloc_latency=cfg.cost.alloc_latency_s,
        amp_speedup=cfg.cost.amp_speedup,
        arena_reuse=cfg.arena_reuse)
    codec = None if cfg.codec == "none" else cfg.codec
    if cfg.engine == "mezo":
        mode = "mezo"
    else:
        mode = "zo2-amp" if codec else "zo2"
    naive = cfg.update_mode == "naive"
    tps = predict_throughput(spec, cost, mode, batch_size=cfg.batch_size,
                             k_slots=cfg.arena_slots, naive_update=naive,
                             overlap=cfg.overlap, codec=codec)

    counts = module_param_counts(spec)
    elem = 4  # presets are counted in their F32 compute format
    block_bytes = counts[block_id(0)] * elem
    persistent = (counts["embed"] + counts["head"]) * elem
    tokens = cfg.batch_size * spec.seq_len
    acts = 2 * tokens * (spec.dim + spec.vocab) * elem  # live dual pair, head
    ratio = _CODEC_RATIO[cfg.codec]
    if cfg.engine == "mezo":
        device_peak = sum(counts.values()) * elem + acts // 2
        host_bytes = uploads = offloads = wire = 0
        breakdown = {"resident_params": sum(counts.values()) * elem}
        makespan = sum(cost.compute_time(m) for m in counts)
        timeline_rows = []
    else:
        device_peak = persistent + cfg.arena_slots * block_bytes + acts
        host_bytes = int(spec.n_blocks * block_bytes * ratio)
        per_pass = 2 if naive else 1
        uploads = offloads = spec.n_blocks * per_pass
        wire = int(uploads * block_bytes * ratio)
        breakdown = {"persistent_params": persistent,
                     "block_arenas": cfg.arena_slots * block_bytes,
                     "activations": acts}
        blocks = [block_id(i) for i in range(spec.n_blocks)]
        dag = build_iteration_dag(
            blocks, k_slots=cfg.arena_slots, overlap=cfg.overlap,
            naive_update=naive,
            wire_bytes={b: int(block_bytes * ratio) for b in blocks})
        timeline = run_schedule(dag, "simulated", cost)
        makespan = timeline.makespan
        timeline_rows = timeline.chrome_trace_rows(0)

    report = MetricsReport(
        config={k: v for k, v in cfg.to_flat().items()},
        losses=[], final_digest="",
        device_peak_bytes=int(device_peak), host_param_bytes=int(host_bytes),
        memory_breakdown={k: int(v) for k, v in breakdown.items()},
        uploads=uploads, offloads=offloads,
        wire_bytes_up=wire, wire_bytes_down=wire,
        makespan_total_s=float(makespan), makespan_mean_s=float(makespan),
        tokens_per_sec_incl_warmup=float(tps),
        tokens_per_sec_excl_warmup=float(tps),
        wall_seconds=0.0,
        extra={"predicted": True, "preset": cfg.preset, "mode": mode},
    )
    if write_artifacts:
        out = cfg.resolved_output_dir()
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
        write_jsonl(out / "timeline.jsonl", timeline_rows)
        write_jsonl(out / "transfers.jsonl", [])
        append_summary_row(out / "summary.csv", report.summary_row())
    return report


def execute_run(cfg: RunConfig, write_artifacts: bool = True) -> MetricsReport:
    if cfg.preset:
        return _execute_preset_sim(cfg, write_artifacts)
    fmt = ElemFormat.F64 if cfg.arith == "f64" else ElemFormat.F32
    spec = cfg.model_spec()
    params = init_params(spec, RngState(cfg.seed), fmt)
    workload = TransformerWorkload(params)
    dataset = gen_synthetic(cfg.vocab, cfg.seq_len, cfg.n_samples,
                            RngState(cfg.seed), cfg.pattern, cfg.batch_size)
    zo = _zo_config(cfg)
    tokens_per_step = cfg.batch_size * cfg.seq_len

    step_walls: list[float] = []
    t_run0 = time.perf_counter()

    if cfg.engine == "mezo":
        engine = RefEngine(workload, zo)
        for j in range(cfg.steps):
            idx = batch_for_step(cfg.seed, j, dataset.n_samples, cfg.batch_size)
            t0 = time.perf_counter()
            engine.step(dataset.batch(idx), j)
            step_walls.append(time.perf_counter() - t0)
        losses = engine.losses
        final = params
        io_bytes = 2 * cfg.batch_size * cfg.seq_len * 8
        device_peak = _mezo_device_bytes(workload, cfg.batch_size, io_bytes)
        breakdown = {"resident_params": sum(b.nbytes for _, b in params.buckets())}
        host_bytes = 0
        uploads = offloads = wire_up = wire_down = 0
        makespans = list(step_walls)
        transfer_rows: list[dict] = []
        timeline_rows: list[dict] = []
    else:
        channel = Channel(cfg.throttle_bytes_per_sec, cfg.throttle_latency_s)
        runtime = OffloadRuntime(params, k_slots=cfg.arena_slots,
                                 codec=cfg.codec, channel=channel,
                                 capacity_bytes=cfg.device_capacity_bytes)
        cost = cost_model_for_spec(
            spec, cfg.batch_size,
            flops_per_sec=cfg.cost.flops_per_sec,
            h2d_bytes_per_sec=cfg.cost.h2d_bytes_per_sec,
            d2h_bytes_per_sec=cfg.cost.d2h_bytes_per_sec,
            latency=cfg.cost.latency_s,
            alloc_latency=cfg.cost.alloc_latency_s,
            amp_speedup=cfg.cost.amp_speedup,
            arena_reuse=cfg.arena_reuse)
        engine = Zo2Engine(workload, zo, runtime, overlap=cfg.overlap,
                           backend=cfg.backend, update_mode=cfg.update_mode,
                           cost=cost)
        for j in range(cfg.steps):
            idx = batch_for_step(cfg.seed, j, dataset.n_samples, cfg.batch_size)
            t0 = time.perf_counter()
            engine.step(dataset.batch(idx), j)
            step_walls.append(time.perf_counter() - t0)
        engine.finalize()
        losses = engine.losses
        final = runtime.params
        report = runtime.memory_report()
        device_peak = report["device_peak_bytes"]
        breakdown = report["breakdown"]
        host_bytes = report["host_param_bytes"]
        counts = runtime.log.counts()
        uploads = sum(v for (_, d), v in counts.items() if d == "upload")
        offloads = sum(v for (_, d), v in counts.items() if d == "offload")
        wire_up = runtime.log.wire_bytes("upload")
        wire_down = runtime.log.wire_bytes("offload")
        if cfg.backend == "simulated":
            makespans = [tl.makespan for _, tl in engine.timelines]
        else:
            makespans = list(step_walls)
        transfer_rows = [r.to_json() for r in runtime.log.records()]
        timeline_rows = []
        for step_idx, tl in engine.timelines:
            timeline_rows.extend(tl.chrome_trace_rows(step_idx))

    wall = time.perf_counter() - t_run0
    total_time = sum(makespans)
    tps_incl = cfg.steps * tokens_per_step / total_time if total_time > 0 else float("inf")
    tail = total_time - makespans[0]
    tps_excl = ((cfg.steps - 1) * tokens_per_step / tail
                if cfg.steps > 1 and tail > 0 else tps_incl)

    report = MetricsReport(
        config={k: v for k, v in cfg.to_flat().items()},
        losses=[float(l) for l in losses],
        final_digest=params_digest(final),
        device_peak_bytes=int(device_peak),
        host_param_bytes=int(host_bytes),
        memory_breakdown={k: int(v) for k, v in breakdown.items()},
        uploads=uploads, offloads=offloads,
        wire_bytes_up=int(wire_up), wire_bytes_down=int(wire_down),
        makespan_total_s=float(total_time),
        makespan_mean_s=float(np.mean(makespans)) if makespans else 0.0,
        tokens_per_sec_incl_warmup=float(tps_incl),
        tokens_per_sec_excl_warmup=float(tps_excl),
        wall_seconds=float(wall),
    )
    if write_artifacts:
        out = cfg.resolved_output_dir()
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
        write_jsonl(out / "timeline.jsonl", timeline_rows)
        write_jsonl(out / "transfers.jsonl", transfer_rows)
        append_summary_row(out / "summary.csv", report.summary_row())
    return report


def append_summary_row(path: Path, row: dict) -> None:
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def cli_run(config_file: str | None = None,
            overrides: dict[str, str] | None = None,
            write_artifacts: bool = True) -> MetricsReport:
    cfg = build_config(config_file, overrides)
    return execute_run(cfg, write_artifacts=write_artifacts)
