"""Scheduler tests: DAG shape, both backends, the validator, and throughput
direction checks.  The makespan oracle is an independent longest-path
computation over the same edge set (plus full path enumeration at small N)."""

import numpy as np
import pytest

from zo2lab.model import EMBED_ID, HEAD_ID, ModelSpec, block_id
from zo2lab.scheduler import (CostModel, Lane, StreamEvent, TaskDag, Timeline,
                              build_iteration_dag, cost_model_for_spec,
                              predict_throughput, run_schedule, run_sequential,
                              topological_order, validate_timeline)


def blocks(n):
    return [block_id(i) for i in range(n)]


def flat_cost(modules, compute=2.0, upload=3.0, offload=3.0, embed=1.0,
              head=1.0, update=0.5, **kw):
    single = {m: compute / 2.0 for m in modules}
    single[EMBED_ID] = embed / 2.0
    single[HEAD_ID] = head / 2.0
    return CostModel(single_forward=single,
                     update_compute={m: update for m in single},
                     upload_seconds_per_byte=upload,
                     offload_seconds_per_byte=offload, **kw)


def wire_one(bids):
    return {b: 1 for b in bids}  # 1 "byte" so per-byte rates are durations


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def longest_path_makespan(dag: TaskDag, cost: CostModel) -> float:
    """Independent critical-path computation (backward recursion + memo)."""
    dur = {t.key: cost.duration(t) for t in dag.tasks}
    memo: dict[str, float] = {}

    def finish(key: str) -> float:
        if key not in memo:
            preds = dag.preds(key)
            memo[key] = dur[key] + (max(map(finish, preds)) if preds else 0.0)
        return memo[key]

    return max(finish(t.key) for t in dag.tasks)


def enumerate_paths_makespan(dag: TaskDag, cost: CostModel) -> float:
    """True brute force: every root-to-sink path, maximum duration sum."""
    dur = {t.key: cost.duration(t) for t in dag.tasks}
    best = 0.0
    stack = [(t.key, dur[t.key]) for t in dag.tasks if not dag.preds(t.key)]
    while stack:
        key, total = stack.pop()
        succs = dag.succs(key)
        if not succs:
            best = max(best, total)
        for s in succs:
            stack.append((s, total + dur[s]))
    return best


def fuzz_cost(rng, modules):
    single = {m: rng.uniform(0.05, 3.0) for m in modules}
    return CostModel(single_forward=single,
                     update_compute={m: rng.uniform(0.0, 1.0) for m in single},
                     upload_seconds_per_byte=rng.uniform(0.0, 4.0),
                     offload_seconds_per_byte=rng.uniform(0.0, 4.0),
                     latency=rng.uniform(0.0, 0.5))


# ---------------------------------------------------------------------------
# simulated backend
# ---------------------------------------------------------------------------


def test_zero_comm_overlapped_makespan_is_pure_compute():
    bids = blocks(4)
    cost = flat_cost(bids, compute=2.0, upload=0.0, offload=0.0)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    tl = run_schedule(dag, "simulated", cost)
    assert tl.makespan == pytest.approx(1.0 + 4 * 2.0 + 1.0)


def test_simulated_equals_brute_force_critical_path():
    bids = blocks(4)
    cost = flat_cost(bids, compute=2.0, upload=3.0, offload=3.0)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    tl = run_schedule(dag, "simulated", cost)
    assert tl.makespan == pytest.approx(longest_path_makespan(dag, cost))
    assert tl.makespan == pytest.approx(enumerate_paths_makespan(dag, cost))


def test_sequential_is_straight_sum():
    bids = blocks(4)
    cost = flat_cost(bids, compute=2.0, upload=3.0, offload=3.0)
    tl = run_sequential(bids, cost, wire_bytes=wire_one(bids))
    expected = 1.0 + 1.0 + 4 * (2.0 + 3.0 + 3.0)
    assert tl.makespan == pytest.approx(expected)


def test_sequential_equals_fully_serialized_schedule():
    bids = blocks(3)
    cost = flat_cost(bids)
    seq = run_sequential(bids, cost, wire_bytes=wire_one(bids))
    dag = build_iteration_dag(bids, overlap=False, wire_bytes=wire_one(bids))
    assert run_schedule(dag, "simulated", cost).makespan == pytest.approx(seq.makespan)


@pytest.mark.parametrize("naive", [False, True])
def test_fuzzed_costs_sound_and_never_worse_than_sequential(naive):
    rng = np.random.default_rng(7)
    bids = blocks(4)
    modules = [EMBED_ID, *bids, HEAD_ID]
    dag = build_iteration_dag(bids, naive_update=naive, wire_bytes=wire_one(bids))
    for _ in range(200):
        cost = fuzz_cost(rng, modules)
        tl = run_schedule(dag, "simulated", cost)
        assert validate_timeline(tl, dag) == []
        assert tl.makespan == pytest.approx(longest_path_makespan(dag, cost))
        seq = run_sequential(bids, cost, naive_update=naive,
                             wire_bytes=wire_one(bids))
        assert tl.makespan <= seq.makespan + 1e-9


def test_monotonicity_shrinking_a_task_never_hurts():
    rng = np.random.default_rng(3)
    bids = blocks(4)
    modules = [EMBED_ID, *bids, HEAD_ID]
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    for _ in range(30):
        cost = fuzz_cost(rng, modules)
        base = run_schedule(dag, "simulated", cost).makespan
        victim = rng.choice(modules)
        cost.single_forward[victim] *= rng.uniform(0.1, 0.9)
        assert run_schedule(dag, "simulated", cost).makespan <= base + 1e-9


def test_head_compute_overlaps_last_offload():
    # Verbatim tail: O(W_N) launches with C(head); no edge forces them apart.
    bids = blocks(4)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    assert (f"O:{bids[-1]}", f"C:{HEAD_ID}") not in dag.edges
    cost = flat_cost(bids, compute=2.0, upload=0.5, offload=50.0, head=10.0)
    tl = run_schedule(dag, "simulated", cost)
    ev = tl.by_key()
    last_off, head = ev[f"O:{bids[-1]}"], ev[f"C:{HEAD_ID}"]
    assert head.t_start < last_off.t_end  # they genuinely overlap
    # and no later block compute overlaps that offload (it is the last one)
    assert ev[f"C:{bids[-1]}"].t_end <= last_off.t_start + 1e-9


def test_embedding_compute_overlaps_first_upload():
    bids = blocks(2)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    cost = flat_cost(bids, embed=4.0, upload=4.0)
    ev = run_schedule(dag, "simulated", cost).by_key()
    assert ev[f"U:{bids[0]}"].t_start == 0.0
    assert ev[f"C:{EMBED_ID}"].t_start == 0.0


def test_slot_ring_edges_present():
    bids = blocks(7)
    dag = build_iteration_dag(bids, k_slots=3, wire_bytes=wire_one(bids))
    for i in range(3, 7):
        assert (f"O:{bids[i - 3]}", f"U:{bids[i]}") in dag.edges


def test_naive_doubles_transfer_tasks():
    bids = blocks(4)
    d1 = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    d2 = build_iteration_dag(bids, naive_update=True, wire_bytes=wire_one(bids))
    count = lambda dag, lane: len(dag.lane_tasks(lane))
    assert count(d2, Lane.UPLOAD) == 2 * count(d1, Lane.UPLOAD)
    assert count(d2, Lane.OFFLOAD) == 2 * count(d1, Lane.OFFLOAD)


def test_overlap_requires_three_slots():
    with pytest.raises(ValueError):
        build_iteration_dag(blocks(4), k_slots=2, overlap=True)
    build_iteration_dag(blocks(4), k_slots=1, overlap=False)


# ---------------------------------------------------------------------------
# threaded backend
# ---------------------------------------------------------------------------


def test_threaded_backend_respects_edges():
    bids = blocks(4)
    modules = [EMBED_ID, *bids, HEAD_ID]
    rng = np.random.default_rng(11)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    for _ in range(20):
        cost = fuzz_cost(rng, modules)
        # scale abstract units into sub-millisecond sleeps
        scaled = CostModel(
            single_forward={m: v * 2e-4 for m, v in cost.single_forward.items()},
            update_compute={m: v * 2e-4 for m, v in cost.update_compute.items()},
            upload_seconds_per_byte=cost.upload_seconds_per_byte * 2e-4,
            offload_seconds_per_byte=cost.offload_seconds_per_byte * 2e-4)
        tl = run_schedule(dag, "threaded", scaled)
        assert validate_timeline(tl, dag) == []


def test_threaded_makespan_tracks_simulation():
    bids = blocks(3)
    cost = flat_cost(bids, compute=2.0, upload=1.0, offload=1.0)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    sim = run_schedule(dag, "simulated", cost).makespan
    scale = 4e-3
    scaled = CostModel(
        single_forward={m: v * scale for m, v in cost.single_forward.items()},
        update_compute={m: v * scale for m, v in cost.update_compute.items()},
        upload_seconds_per_byte=scale, offload_seconds_per_byte=scale)
    wall = run_schedule(dag, "threaded", scaled).makespan
    # sleep + dispatch jitter only ever adds time
    assert wall >= sim * scale * 0.95
    assert wall <= sim * scale * 1.6 + 0.05


def test_threaded_functional_execution_order():
    bids = blocks(3)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    seen = []
    fns = {t.key: (lambda k=t.key: seen.append(k)) for t in dag.tasks}
    tl = run_schedule(dag, "threaded", task_fns=fns)
    assert validate_timeline(tl, dag) == []
    order = {k: i for i, k in enumerate(seen)}
    for pred, succ in dag.edges:
        assert order[pred] < order[succ]


def test_threaded_task_exception_propagates():
    bids = blocks(2)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    def boom():
        raise RuntimeError("task failed")
    fns = {t.key: (lambda: None) for t in dag.tasks}
    fns[f"C:{bids[1]}"] = boom
    with pytest.raises(RuntimeError, match="task failed"):
        run_schedule(dag, "threaded", task_fns=fns)


# ---------------------------------------------------------------------------
# validator
# ---------------------------------------------------------------------------


def test_validator_flags_constructed_violation():
    bids = blocks(2)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    cost = flat_cost(bids)
    tl = run_schedule(dag, "simulated", cost)
    assert validate_timeline(tl, dag) == []
    # pull C(W_2)'s start before U(W_2)'s end
    ukey, ckey = f"U:{bids[1]}", f"C:{bids[1]}"
    ev = tl.by_key()
    bad_events = [StreamEvent(e.lane, e.key, e.module,
                              0.0 if e.key == ckey else e.t_start,
                              1e-6 if e.key == ckey else e.t_end)
                  for e in tl.events]
    violations = validate_timeline(Timeline(bad_events), dag)
    assert any(v.pred == ukey and v.succ == ckey for v in violations)
    assert ev[ukey].t_end > 0.0


def test_validator_counts_fuzzed_edge_flips():
    rng = np.random.default_rng(5)
    bids = blocks(4)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    cost = flat_cost(bids)
    tl = run_schedule(dag, "simulated", cost)
    for _ in range(25):
        k = rng.integers(1, 4)
        flipped = list(rng.choice(len(dag.edges), size=k, replace=False))
        bad = {dag.edges[i] for i in flipped}
        events = []
        for e in tl.events:
            start = e.t_start
            for pred, succ in bad:
                if e.key == succ:  # yank the successor before its pred ends
                    start = -1.0 - e.t_start
            events.append(StreamEvent(e.lane, e.key, e.module, start,
                                      start + e.duration))
        violations = validate_timeline(Timeline(events), dag)
        found = {(v.pred, v.succ) for v in violations if v.kind == "dependency"}
        assert bad <= found


def test_validator_reports_missing_events():
    bids = blocks(2)
    dag = build_iteration_dag(bids, wire_bytes=wire_one(bids))
    violations = validate_timeline(Timeline([]), dag)
    assert len(violations) == len(dag.tasks)


def test_topological_order_deterministic_and_complete():
    bids = blocks(5)
    dag = build_iteration_dag(bids, naive_update=True, wire_bytes=wire_one(bids))
    order = [t.key for t in topological_order(dag)]
    assert len(order) == len(dag.tasks)
    assert order == [t.key for t in topological_order(dag)]


# ---------------------------------------------------------------------------
# throughput prediction
# ---------------------------------------------------------------------------


def test_throughput_ratio_regimes():
    # full-depth plan: pipeline fill/drain is O(1/N), so the 0.97 bound needs
    # real proportions (the simulator is analytic; size costs nothing)
    spec = ModelSpec(40, 5120, 40, 50272, 2048)
    base = cost_model_for_spec(spec, 1)
    block_dual = base.compute_time(block_id(0))
    from dataclasses import replace
    from zo2lab.scheduler import module_param_counts
    block_bytes = module_param_counts(spec)[block_id(0)] * 4

    def with_comm(factor):
        rate = block_bytes / (block_dual * factor)
        return replace(base, upload_seconds_per_byte=1.0 / rate,
                       offload_seconds_per_byte=1.0 / rate, latency=0.0)

    mezo = predict_throughput(spec, base, "mezo")
    comm_light = with_comm(0.8)
    ratio_light = predict_throughput(spec, comm_light, "zo2") / \
        predict_throughput(spec, comm_light, "mezo")
    assert ratio_light >= 0.97
    comm_heavy = with_comm(2.0)
    ratio_heavy = predict_throughput(spec, comm_heavy, "zo2") / \
        predict_throughput(spec, comm_heavy, "mezo")
    assert ratio_heavy < 0.8
    assert mezo > 0


def test_amp_codec_ordering_when_comm_bound():
    spec = ModelSpec(24, 64, 4, 256, 32)
    base = cost_model_for_spec(spec, 1)
    from dataclasses import replace
    from zo2lab.scheduler import module_param_counts
    block_bytes = module_param_counts(spec)[block_id(0)] * 4
    slow = replace(base,
                   upload_seconds_per_byte=2.0 * base.compute_time(block_id(0)) / block_bytes,
                   offload_seconds_per_byte=2.0 * base.compute_time(block_id(0)) / block_bytes)
    tps = {c: predict_throughput(spec, slow, "zo2-amp", codec=c)
           for c in (None, "f16", "bf16", "f8")}
    assert tps["f8"] > tps["bf16"] > tps[None]
    assert tps["f16"] == tps["bf16"]  # equal wire width, equal schedule


def test_compute_time_doubles_single_forward():
    spec = ModelSpec(2, 32, 4, 64, 16)
    cost = cost_model_for_spec(spec, 1)
    for m in (EMBED_ID, block_id(0), HEAD_ID):
        assert cost.compute_time(m) == pytest.approx(2 * cost.single_forward[m])
