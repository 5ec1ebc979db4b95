"""Experiment suites: equivalence, ablation, amp, memory-scaling, sweep.

Every suite emits machine-checkable pass/fail lines (no human inspection) and
a CSV of its rows.  Throughput comparisons are ratios against the same-host
monolithic run, never absolute claims.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..errors import UsageError
from ..model import block_id
from ..scheduler import cost_model_for_spec, module_param_counts, predict_throughput
from .config import OPT_PRESETS, RunConfig
from .runner import execute_run

SUITE_NAMES = ("equivalence", "ablation", "amp", "memory-scaling", "sweep")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}: {self.name} ({self.detail})"


@dataclass
class SuiteReport:
    name: str
    rows: list[dict] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    csv_path: str = ""

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        return [c.line() for c in self.checks]


def _toy_config(**kw) -> RunConfig:
    base = dict(n_blocks=4, dim=32, n_heads=4, vocab=64, seq_len=16,
                batch_size=2, n_samples=64, steps=25, seed=1234,
                eps=1e-3, lr=1e-3, output_dir="")
    base.update(kw)
    return RunConfig(**base)


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    cols: list[str] = []
    for row in rows:
        cols += [k for k in row if k not in cols]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, restval="")
        writer.writeheader()
        writer.writerows(rows)


def _suite_equivalence(out_dir: Path) -> SuiteReport:
    report = SuiteReport("equivalence")
    ref = execute_run(_toy_config(engine="mezo"), write_artifacts=False)
    variants = {
        "zo2-threaded-overlap": _toy_config(engine="zo2", backend="threaded"),
        "zo2-no-overlap": _toy_config(engine="zo2", backend="threaded",
                                      overlap=False),
        "zo2-slots-4": _toy_config(engine="zo2", arena_slots=4),
        "zo2-simulated": _toy_config(engine="zo2", backend="simulated"),
        "zo2-naive-update": _toy_config(engine="zo2", update_mode="naive"),
    }
    report.rows.append({"run": "mezo-reference", "digest": ref.final_digest,
                        "final_loss": ref.final_loss})
    for name, cfg in variants.items():
        res = execute_run(cfg, write_artifacts=False)
        same = res.final_digest == ref.final_digest
        same_losses = res.losses == ref.losses
        report.rows.append({"run": name, "digest": res.final_digest,
                            "final_loss": res.final_loss})
        report.checks.append(Check(
            f"digest[{name}] == digest[mezo]", same,
            f"{res.final_digest[:12]} vs {ref.final_digest[:12]}"))
        report.checks.append(Check(
            f"losses[{name}] == losses[mezo]", same_losses,
            f"{len(res.losses)} steps compared bit-for-bit"))
    return report


def _comm_significant_cost(spec, batch_size: int, alloc_factor: float = 3.0):
    """Fitted regime: per-block comm comparable to dual-forward compute, and
    allocation cost dominating both when arena reuse is off."""
    cost = cost_model_for_spec(spec, batch_size)
    block_dual = cost.compute_time(block_id(0))
    block_bytes = module_param_counts(spec)[block_id(0)] * 4
    bw = block_bytes / block_dual  # upload time == dual compute time
    return replace(cost, upload_seconds_per_byte=1.0 / bw,
                   offload_seconds_per_byte=1.0 / bw,
                   alloc_latency=alloc_factor * block_dual)


def _suite_ablation(out_dir: Path) -> SuiteReport:
    report = SuiteReport("ablation")
    spec = OPT_PRESETS["opt-13b"]
    cost = _comm_significant_cost(spec, batch_size=1)
    mezo = predict_throughput(spec, cost, "mezo")
    rows = {
        "full": predict_throughput(spec, cost, "zo2"),
        "no-deferred-update": predict_throughput(spec, cost, "zo2",
                                                 naive_update=True),
        "no-overlap": predict_throughput(spec, cost, "zo2", overlap=False),
        "no-reusable-memory": predict_throughput(
            spec, replace(cost, arena_reuse=False), "zo2"),
    }
    for name, tps in rows.items():
        report.rows.append({"variant": name, "tokens_per_sec": tps,
                            "ratio_vs_mezo": tps / mezo})
    report.checks.append(Check(
        "full > no-deferred-update",
        rows["full"] > rows["no-deferred-update"],
        f"{rows['full']:.1f} vs {rows['no-deferred-update']:.1f}"))
    report.checks.append(Check(
        "no-deferred-update > no-overlap",
        rows["no-deferred-update"] > rows["no-overlap"],
        f"{rows['no-deferred-update']:.1f} vs {rows['no-overlap']:.1f}"))
    report.checks.append(Check(
        "no-reusable-memory is the slowest variant",
        rows["no-reusable-memory"] < min(rows["no-overlap"],
                                         rows["no-deferred-update"]),
        f"{rows['no-reusable-memory']:.1f}"))
    return report


def _suite_amp(out_dir: Path) -> SuiteReport:
    report = SuiteReport("amp")
    ref = execute_run(_toy_config(engine="mezo", steps=40), write_artifacts=False)
    base_wire = None
    for codec in ("none", "f16", "bf16", "f8"):
        # the compression ratios are defined against the F32 wire format
        cfg = _toy_config(engine="zo2", backend="simulated", steps=40,
                          codec=codec, arith="f32")
        res = execute_run(cfg, write_artifacts=False)
        per_block_upload = res.wire_bytes_up // (res.uploads or 1)
        if codec == "none":
            base_wire = per_block_upload
        ratio = per_block_upload / base_wire if base_wire else float("nan")
        loss_rel = abs(res.final_loss - ref.final_loss) / abs(ref.final_loss)
        report.rows.append({
            "codec": codec, "wire_bytes_per_block": per_block_upload,
            "wire_ratio_vs_f32": ratio, "final_loss": res.final_loss,
            "rel_loss_vs_ref": loss_rel,
        })
        if codec != "none":
            expected = 0.25 if codec == "f8" else 0.5
            report.checks.append(Check(
                f"wire ratio[{codec}] == {expected}", ratio == expected,
                f"measured {ratio}"))
            report.checks.append(Check(
                f"loss drift[{codec}] <= 5% of reference", loss_rel <= 0.05,
                f"relative difference {loss_rel:.4f}"))
    # comm-bound regime: lower-bit wire beats higher-bit wire
    spec = OPT_PRESETS["opt-13b"]
    cost = _comm_significant_cost(spec, batch_size=1)
    tps = {c: predict_throughput(spec, cost, "zo2-amp", codec=c)
           for c in (None, "bf16", "f8")}
    report.checks.append(Check(
        "comm-bound: f8 > bf16 > none",
        tps["f8"] > tps["bf16"] > tps[None],
        f"f8={tps['f8']:.1f} bf16={tps['bf16']:.1f} none={tps[None]:.1f}"))
    report.rows.append({"codec": "sim-none", "tokens_per_sec": tps[None]})
    report.rows.append({"codec": "sim-bf16", "tokens_per_sec": tps["bf16"]})
    report.rows.append({"codec": "sim-f8", "tokens_per_sec": tps["f8"]})
    return report


def _suite_memory_scaling(out_dir: Path) -> SuiteReport:
    report = SuiteReport("memory-scaling")
    peaks, hosts = {}, {}
    for n in (4, 8, 16):
        cfg = _toy_config(engine="zo2", backend="simulated", steps=3,
                          n_blocks=n)
        res = execute_run(cfg, write_artifacts=False)
        mezo = execute_run(_toy_config(engine="mezo", steps=1, n_blocks=n),
                           write_artifacts=False)
        peaks[n], hosts[n] = res.device_peak_bytes, res.host_param_bytes
        report.rows.append({
            "n_blocks": n, "zo2_device_peak_bytes": res.device_peak_bytes,
            "zo2_host_param_bytes": res.host_param_bytes,
            "mezo_device_peak_bytes": mezo.device_peak_bytes,
        })
    report.checks.append(Check(
        "device peak identical across n_blocks in {4,8,16}",
        peaks[4] == peaks[8] == peaks[16],
        f"{peaks[4]} / {peaks[8]} / {peaks[16]} bytes"))
    report.checks.append(Check(
        "host bytes scale linearly with n_blocks",
        hosts[8] == 2 * hosts[4] and hosts[16] == 4 * hosts[4],
        f"{hosts[4]} / {hosts[8]} / {hosts[16]} bytes"))
    return report


def _suite_sweep(out_dir: Path) -> SuiteReport:
    """Batch-size and sequence-length sweep at toy dims (simulated): the
    block-wise engine must stay memory-smaller and near throughput parity
    across the whole grid."""
    from ..model import ModelSpec
    from ..scheduler import predict_throughput as predict

    report = SuiteReport("sweep")
    ok_memory, ok_ratio = True, True
    k = 3
    for batch in (1, 2, 4, 8):
        for seq in (1024, 2048):
            spec = ModelSpec(12, 128, 4, 512, seq)
            # toy blocks move in tens of microseconds; the per-transfer
            # latency is scaled to that granularity
            cost = cost_model_for_spec(spec, batch, latency=5e-6)
            counts = module_param_counts(spec)
            block_bytes = counts[block_id(0)] * 4
            persistent = (counts["embed"] + counts["head"]) * 4
            # activations are the same workload either way at toy dims;
            # the mechanism under test is parameter residency
            acts = 2 * batch * seq * (spec.dim + spec.vocab) * 4
            zo2_param_bytes = persistent + k * block_bytes
            mezo_param_bytes = sum(counts.values()) * 4
            mezo_tps = predict(spec, cost, "mezo", batch_size=batch)
            zo2_tps = predict(spec, cost, "zo2", batch_size=batch, k_slots=k)
            ratio = zo2_tps / mezo_tps
            ok_memory &= zo2_param_bytes < mezo_param_bytes
            ok_ratio &= ratio >= 0.9
            report.rows.append({
                "batch_size": batch, "seq_len": seq,
                "mezo_param_bytes": mezo_param_bytes,
                "zo2_param_bytes": zo2_param_bytes,
                "activation_bytes": acts,
                "mezo_tokens_per_sec": mezo_tps, "zo2_tokens_per_sec": zo2_tps,
                "throughput_ratio": ratio,
            })
    report.checks.append(Check(
        "zo2 resident param bytes < mezo across the grid", ok_memory,
        "8 cells"))
    report.checks.append(Check(
        "zo2/mezo throughput ratio >= 0.9 across the grid", ok_ratio,
        "8 cells"))
    return report


_SUITES = {
    "equivalence": _suite_equivalence,
    "ablation": _suite_ablation,
    "amp": _suite_amp,
    "memory-scaling": _suite_memory_scaling,
    "sweep": _suite_sweep,
}


def run_suite(name: str, output_dir: str | Path = "runs") -> SuiteReport:
    if name not in _SUITES:
        raise UsageError(f"unknown suite {name!r}; choose from {SUITE_NAMES}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = _SUITES[name](out)
    csv_path = out / f"suite_{name}.csv"
    _write_csv(csv_path, report.rows)
    report.csv_path = str(csv_path)
    return report
