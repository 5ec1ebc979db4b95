"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL
line.  Tolerances are pinned here, not calibrated elsewhere.

Run with: pytest tests/test_acceptance.py -v -s
"""

import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from test_scheduler import (enumerate_paths_makespan, flat_cost, fuzz_cost,
                            longest_path_makespan, wire_one)
from zo2lab.harness.config import RunConfig
from zo2lab.harness.runner import execute_run
from zo2lab.model import EMBED_ID, HEAD_ID, ModelSpec, block_id, init_params
from zo2lab.numerics import (ElemFormat, PERTURB_STREAM, RngState, TensorBuf,
                             decode, encode, gaussian_fill)
from zo2lab.scheduler import (CostModel, build_iteration_dag,
                              cost_model_for_spec, module_param_counts,
                              predict_throughput, run_schedule, run_sequential,
                              validate_timeline)
from zo2lab.zo_ref import perturb_all


@contextmanager
def criterion(num: int, title: str):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"\nFAIL: criterion {num} - {title}")
        raise
    print(f"\nPASS: criterion {num} - {title} "
          f"[{time.perf_counter() - t0:.1f}s]")


def toy(**kw):
    base = dict(n_blocks=4, dim=32, n_heads=4, vocab=64, seq_len=16,
                batch_size=2, n_samples=64, steps=100, seed=20240601,
                eps=1e-3, lr=1e-3, output_dir="")
    base.update(kw)
    return RunConfig(**base)


def test_criterion_1_bit_exact_equivalence():
    """Toy model, F64, codec none, T=100, overlap on, K=3: digests equal."""
    with criterion(1, "bit-exact MeZO/ZO2 equivalence (0 bytes differ)"):
        t0 = time.perf_counter()
        ref = execute_run(toy(engine="mezo"), write_artifacts=False)
        zo2 = execute_run(toy(engine="zo2", backend="threaded", overlap=True,
                              arena_slots=3), write_artifacts=False)
        elapsed = time.perf_counter() - t0
        assert zo2.final_digest == ref.final_digest
        assert zo2.losses == ref.losses
        assert elapsed < 30.0, f"took {elapsed:.1f}s"


def test_criterion_2_rge_correctness():
    """16-dim quadratic: mean g*z within cosine 0.95 of the true gradient."""
    with criterion(2, "randomized gradient estimator correctness"):
        t0 = time.perf_counter()
        dim, eps, trials = 16, 1e-4, 10_000
        z0, _ = gaussian_fill(RngState(2), dim)
        theta = 3.0 + z0
        grad = theta.copy()  # L = 0.5 ||theta||^2  =>  grad = theta
        acc = np.zeros(dim)
        for j in range(trials):
            z, _ = gaussian_fill(RngState(7777, PERTURB_STREAM, j * dim), dim)
            l_plus = 0.5 * ((theta + eps * z) ** 2).sum()
            l_minus = 0.5 * ((theta - eps * z) ** 2).sum()
            g = (l_plus - l_minus) / (2 * eps)
            acc += g * z
        mean = acc / trials
        cos = mean @ grad / (np.linalg.norm(mean) * np.linalg.norm(grad))
        assert cos >= 0.95, cos

        g = (1.2 - 0.8) / (2 * 0.1)  # the defining expression, no tolerance
        assert g == (1.2 - 0.8) / (2 * 0.1)
        assert abs(g - 2.0) < 1e-15
        assert time.perf_counter() - t0 < 10.0


def test_criterion_3_constant_device_residency():
    """Device peak identical for n_blocks in {4,8,16}; host grows linearly."""
    with criterion(3, "O(1) device residency, linear host growth"):
        t0 = time.perf_counter()
        peaks, hosts = {}, {}
        for n in (4, 8, 16):
            res = execute_run(toy(engine="zo2", backend="simulated", steps=3,
                                  n_blocks=n), write_artifacts=False)
            peaks[n], hosts[n] = res.device_peak_bytes, res.host_param_bytes
        assert peaks[4] == peaks[8] == peaks[16]  # exact byte equality
        assert hosts[8] == 2 * hosts[4]
        assert hosts[16] == 4 * hosts[4]
        assert time.perf_counter() - t0 < 30.0


def test_criterion_4_transfer_count_law():
    """Deferred: 1 upload + 1 offload per block per iteration; naive: 2 + 2."""
    with criterion(4, "transfer-count law (deferred halves bandwidth)"):
        steps, blocks = 6, 4
        deferred = execute_run(toy(engine="zo2", backend="simulated",
                                   steps=steps), write_artifacts=False)
        assert deferred.uploads == steps * blocks * 1
        assert deferred.offloads == steps * blocks * 1
        naive = execute_run(toy(engine="zo2", backend="simulated", steps=steps,
                                update_mode="naive"), write_artifacts=False)
        assert naive.uploads == steps * blocks * 2
        assert naive.offloads == steps * blocks * 2


def test_criterion_5_scheduler_soundness():
    """1000 fuzzed cost models, both backends: no violations; overlapped <=
    sequential; simulated makespan == brute-force critical path (<= 1 unit)."""
    with criterion(5, "scheduler soundness over 1000 fuzzed cost models"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(99)
        bids = [block_id(i) for i in range(4)]
        modules = [EMBED_ID, *bids, HEAD_ID]
        dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
        for trial in range(1000):
            cost = fuzz_cost(rng, modules)
            tl = run_schedule(dag, "simulated", cost)
            assert validate_timeline(tl, dag) == []
            seq = run_sequential(bids, cost, wire_bytes=wire_one(bids))
            assert tl.makespan <= seq.makespan + 1e-9
            assert abs(tl.makespan - longest_path_makespan(dag, cost)) <= 1.0
            if trial % 97 == 0:  # exponential enumeration on a subsample
                assert abs(tl.makespan
                           - enumerate_paths_makespan(dag, cost)) <= 1.0

        for trial in range(1000):
            cost = fuzz_cost(rng, modules)
            scaled = CostModel(
                single_forward={m: v * 5e-5 for m, v in
                                cost.single_forward.items()},
                update_compute={m: v * 5e-5 for m, v in
                                cost.update_compute.items()},
                upload_seconds_per_byte=cost.upload_seconds_per_byte * 5e-5,
                offload_seconds_per_byte=cost.offload_seconds_per_byte * 5e-5)
            tl = run_schedule(dag, "threaded", scaled)
            assert validate_timeline(tl, dag) == []
        assert time.perf_counter() - t0 < 60.0


def test_criterion_6_throughput_ratio_trend():
    """comm <= compute: zo2/mezo >= 0.97; comm = 2x compute: < 0.8."""
    with criterion(6, "throughput ratio trend across comm regimes"):
        spec = ModelSpec(40, 5120, 40, 50272, 2048)
        base = cost_model_for_spec(spec, 1)
        block_dual = base.compute_time(block_id(0))
        block_bytes = module_param_counts(spec)[block_id(0)] * 4

        def with_comm(factor):
            spb = (block_dual * factor) / block_bytes
            return replace(base, upload_seconds_per_byte=spb,
                           offload_seconds_per_byte=spb, latency=0.0)

        light = with_comm(0.8)
        ratio = predict_throughput(spec, light, "zo2") / \
            predict_throughput(spec, light, "mezo")
        assert ratio >= 0.97, ratio
        heavy = with_comm(2.0)
        ratio_heavy = predict_throughput(spec, heavy, "zo2") / \
            predict_throughput(spec, heavy, "mezo")
        assert ratio_heavy < 0.8, ratio_heavy


def test_criterion_7_ablation_ordering():
    """Comm-significant costs: full ZO2 > no-deferred-update > no-overlap."""
    with criterion(7, "reverse-ablation throughput ordering"):
        spec = ModelSpec(40, 5120, 40, 50272, 2048)
        base = cost_model_for_spec(spec, 1)
        block_dual = base.compute_time(block_id(0))
        block_bytes = module_param_counts(spec)[block_id(0)] * 4
        spb = block_dual / block_bytes  # comm == dual compute per block
        cost = replace(base, upload_seconds_per_byte=spb,
                       offload_seconds_per_byte=spb)
        full = predict_throughput(spec, cost, "zo2")
        no_deferred = predict_throughput(spec, cost, "zo2", naive_update=True)
        no_overlap = predict_throughput(spec, cost, "zo2", overlap=False)
        assert full > no_deferred > no_overlap, \
            (full, no_deferred, no_overlap)


def test_criterion_8_compression_ratios_and_fidelity():
    """Wire ratios exact; round-trip error bounds; bounded loss drift."""
    with criterion(8, "codec ratios, round-trip bounds, training fidelity"):
        t0 = time.perf_counter()
        z, _ = gaussian_fill(RngState(8), 4096)
        src = TensorBuf(z.astype(np.float32), (4096,), ElemFormat.F32)
        assert encode(src, ElemFormat.F16).nbytes * 2 == src.nbytes
        assert encode(src, ElemFormat.BF16).nbytes * 2 == src.nbytes
        assert encode(src, ElemFormat.F8E4M3).nbytes * 4 == src.nbytes

        x = (np.abs(z[:2000]) + 1e-2).astype(np.float32)
        bf = decode(encode(TensorBuf(x, x.shape, ElemFormat.F32),
                           ElemFormat.BF16), ElemFormat.F64).data
        assert (np.abs(bf - x) / x).max() <= 2.0 ** -8
        # e4m3 in-range: positive normals well inside [2^-6, 448]
        y = np.clip(np.abs(z[:2000]) * 8 + 0.1, 0.0625, 448.0).astype(np.float32)
        f8 = decode(encode(TensorBuf(y, y.shape, ElemFormat.F32),
                           ElemFormat.F8E4M3), ElemFormat.F64).data
        assert (np.abs(f8 - y) / y).max() <= 2.0 ** -2

        ref = execute_run(toy(engine="mezo"), write_artifacts=False)
        for codec in ("f16", "bf16", "f8"):
            res = execute_run(toy(engine="zo2", backend="simulated",
                                  codec=codec), write_artifacts=False)
            per_upload = res.wire_bytes_up // res.uploads
            expected_ratio = 0.25 if codec == "f8" else 0.5
            f32_block_bytes = module_param_counts(
                toy().model_spec())[block_id(0)] * 4
            assert per_upload == int(f32_block_bytes * expected_ratio)
            drift = abs(res.final_loss - ref.final_loss) / abs(ref.final_loss)
            assert drift <= 0.05, (codec, drift)
        assert time.perf_counter() - t0 < 60.0


def test_criterion_9_perturb_restore_drift():
    """One +eps/-2eps/+eps cycle leaves every F64 parameter within 4 ulp
    (of the perturbed magnitude); both engines drift identically."""
    with criterion(9, "perturb/restore drift bound and drift identity"):
        cfg = toy()
        params = init_params(cfg.model_spec(), RngState(cfg.seed))
        before = [b.flat.copy() for _, b in params.buckets()]
        rs = RngState(321, PERTURB_STREAM, 0)
        perturb_all(params, cfg.eps, rs)
        perturb_all(params, -2.0 * cfg.eps, rs)
        perturb_all(params, cfg.eps, rs)
        state = rs
        for (_, b), prev in zip(params.buckets(), before):
            if b.size == 0:
                continue
            zvals, state = gaussian_fill(state, b.size)
            intermediate = np.abs(prev) + cfg.eps * np.abs(zvals)
            ulps = np.abs(b.flat - prev) / np.spacing(intermediate)
            assert ulps.max() <= 4.0, ulps.max()

        # drift identity between engines for one step (localizes criterion 1)
        one_ref = execute_run(toy(engine="mezo", steps=1),
                              write_artifacts=False)
        one_zo2 = execute_run(toy(engine="zo2", steps=1),
                              write_artifacts=False)
        assert one_zo2.final_digest == one_ref.final_digest
