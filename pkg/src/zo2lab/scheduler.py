"""Three-lane dependency scheduler with two interchangeable backends.

One iteration of block-wise training is a static task DAG over three FIFO
lanes (compute / upload / offload).  The same DAG description drives both a
threaded backend (three worker threads, completion events enforce edges, wall
clock timestamps) and a discrete-event simulator (analytic start/end times
from a cost model, with task closures executed in deterministic topological
order so functional results never depend on the backend).  Divergence between
the two is a bug, not a calibration issue, and validate_timeline() reports it.

Dependency rules for the overlapped schedule, with K reusable device arenas:

  C(W_i) after U(W_i) and C(W_{i-1});  O(W_i) after C(W_i) and O(W_{i-1});
  U(W_{i+1}) after U(W_i);             U(W_i) after O(W_{i-K})  [arena reuse]

Embedding compute overlaps U(W_1); head compute overlaps O(W_N).  There is no
global barrier per block: every constraint is a point-to-point edge.
"""

from __future__ import annotations

import heapq
import math
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping

from .errors import SchedulingContractError
from .model import EMBED_ID, HEAD_ID, ModelSpec, block_id, block_layout, embed_layout, head_layout


class Lane(Enum):
    COMPUTE = "compute"
    UPLOAD = "upload"
    OFFLOAD = "offload"


@dataclass(frozen=True)
class TaskSpec:
    key: str
    lane: Lane
    module: str
    kind: str            # "dual" | "update" for compute; lane name for transfers
    bytes: int = 0       # wire bytes for transfer tasks
    phase: int = 1       # naive-update mode runs a second transfer pass


@dataclass
class TaskDag:
    tasks: list[TaskSpec]
    edges: list[tuple[str, str]]

    def __post_init__(self):
        self.by_key: dict[str, TaskSpec] = {t.key: t for t in self.tasks}
        if len(self.by_key) != len(self.tasks):
            raise ValueError("duplicate task keys in DAG")
        self._preds: dict[str, list[str]] = {t.key: [] for t in self.tasks}
        self._succs: dict[str, list[str]] = {t.key: [] for t in self.tasks}
        for pred, succ in self.edges:
            if pred not in self.by_key or succ not in self.by_key:
                raise ValueError(f"edge ({pred}, {succ}) references unknown task")
            self._preds[succ].append(pred)
            self._succs[pred].append(succ)

    def preds(self, key: str) -> list[str]:
        return self._preds[key]

    def succs(self, key: str) -> list[str]:
        return self._succs[key]

    def lane_tasks(self, lane: Lane) -> list[TaskSpec]:
        return [t for t in self.tasks if t.lane == lane]


@dataclass
class StreamEvent:
    lane: Lane
    key: str
    module: str
    t_start: float
    t_end: float

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass
class Timeline:
    events: list[StreamEvent] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        if not self.events:
            return 0.0
        return max(e.t_end for e in self.events) - min(e.t_start for e in self.events)

    def by_key(self) -> dict[str, StreamEvent]:
        return {e.key: e for e in self.events}

    def chrome_trace_rows(self, step: int | None = None) -> list[dict]:
        """One dict per event: lane/block/t_start/t_end under Chrome-trace
        field naming (ts/dur in microseconds) so external viewers load it."""
        lane_tid = {Lane.COMPUTE: 0, Lane.UPLOAD: 1, Lane.OFFLOAD: 2}
        rows = []
        for e in self.events:
            args = {"block": e.module, "t_start": e.t_start, "t_end": e.t_end}
            if step is not None:
                args["step"] = step
            rows.append({
                "name": e.key, "cat": e.lane.value, "ph": "X", "pid": 0,
                "tid": lane_tid[e.lane], "ts": e.t_start * 1e6,
                "dur": e.duration * 1e6, "args": args,
            })
        return rows


# ---------------------------------------------------------------------------
# DAG construction
# ---------------------------------------------------------------------------


def _ckey(module: str, phase: int = 1) -> str:
    return f"C:{module}" if phase == 1 else f"C2:{module}"


def _ukey(module: str, phase: int = 1) -> str:
    return f"U:{module}" if phase == 1 else f"U2:{module}"


def _okey(module: str, phase: int = 1) -> str:
    return f"O:{module}" if phase == 1 else f"O2:{module}"


def build_iteration_dag(block_ids: list[str], *, k_slots: int = 3,
                        overlap: bool = True, naive_update: bool = False,
                        wire_bytes: Mapping[str, int] | int = 0,
                        embed_id: str = EMBED_ID,
                        head_id: str = HEAD_ID) -> TaskDag:
    """Task DAG for one training iteration.

    Blocks get upload/compute/offload triples; the first and last modules
    (embedding and head) are device-resident and get compute tasks only.
    naive_update appends a second upload/update/offload pass per block (plus
    resident update computes), modelling update-after-forward; it starts only
    once the head compute has produced g, which the phase-boundary edges
    encode.
    """
    if k_slots < 1:
        raise ValueError("k_slots must be >= 1")
    if overlap and k_slots < 3:
        raise ValueError("overlap requires at least 3 arena slots")

    def nbytes(mod: str) -> int:
        return wire_bytes if isinstance(wire_bytes, int) else int(wire_bytes[mod])

    tasks: list[TaskSpec] = []
    edges: list[tuple[str, str]] = []
    n = len(block_ids)

    compute_chain = [(_ckey(embed_id), embed_id, "dual", 1)]
    compute_chain += [(_ckey(b), b, "dual", 1) for b in block_ids]
    compute_chain += [(_ckey(head_id), head_id, "dual", 1)]
    if naive_update:
        compute_chain += [(_ckey(embed_id, 2), embed_id, "update", 2)]
        compute_chain += [(_ckey(b, 2), b, "update", 2) for b in block_ids]
        compute_chain += [(_ckey(head_id, 2), head_id, "update", 2)]

    upload_chain = [(_ukey(b), b, 1) for b in block_ids]
    offload_chain = [(_okey(b), b, 1) for b in block_ids]
    if naive_update:
        upload_chain += [(_ukey(b, 2), b, 2) for b in block_ids]
        offload_chain += [(_okey(b, 2), b, 2) for b in block_ids]

    for key, mod, kind, phase in compute_chain:
        tasks.append(TaskSpec(key, Lane.COMPUTE, mod, kind, 0, phase))
    for key, mod, phase in upload_chain:
        tasks.append(TaskSpec(key, Lane.UPLOAD, mod, "upload", nbytes(mod), phase))
    for key, mod, phase in offload_chain:
        tasks.append(TaskSpec(key, Lane.OFFLOAD, mod, "offload", nbytes(mod), phase))

    # in-lane FIFO chains
    for chain in (compute_chain,):
        for (a, *_), (b, *_) in zip(chain, chain[1:]):
            edges.append((a, b))
    for chain in (upload_chain, offload_chain):
        for (a, *_), (b, *_) in zip(chain, chain[1:]):
            edges.append((a, b))

    # cross-lane data edges
    for i, b in enumerate(block_ids):
        edges.append((_ukey(b), _ckey(b)))      # compute needs the bytes in place
        edges.append((_ckey(b), _okey(b)))      # offload carries post-compute bytes
        if i >= k_slots:                        # arena freed by the K-back offload
            edges.append((_okey(block_ids[i - k_slots]), _ukey(b)))

    if naive_update:
        for i, b in enumerate(block_ids):
            edges.append((_okey(b), _ukey(b, 2)))       # re-upload what phase 1 wrote
            edges.append((_ukey(b, 2), _ckey(b, 2)))
            edges.append((_ckey(b, 2), _okey(b, 2)))
            # slot (i mod K): wait for its last phase-1 occupant, then phase-2 reuse
            last1 = ((n - 1 - i) // k_slots) * k_slots + i
            if last1 != i:
                edges.append((_okey(block_ids[last1]), _ukey(b, 2)))
            if i >= k_slots:
                edges.append((_okey(block_ids[i - k_slots], 2), _ukey(b, 2)))
        # updates need g, which exists only after the phase-1 head compute
        edges.append((_ckey(head_id), _ckey(embed_id, 2)))

    dag = TaskDag(tasks, edges)
    if not overlap:
        dag = serialize_dag(dag)
    return dag


def serialize_dag(dag: TaskDag) -> TaskDag:
    """Full serialization: strict upload -> compute -> offload chaining."""
    order: list[str] = []
    for t in dag.lane_tasks(Lane.COMPUTE):
        ukey, okey = _ukey(t.module, t.phase), _okey(t.module, t.phase)
        if ukey in dag.by_key:
            order.append(ukey)
        order.append(t.key)
        if okey in dag.by_key:
            order.append(okey)
    edges = list(dag.edges) + list(zip(order, order[1:]))
    # dedupe while preserving determinism
    seen, uniq = set(), []
    for e in edges:
        if e not in seen:
            seen.add(e)
            uniq.append(e)
    return TaskDag(dag.tasks, uniq)


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


@dataclass
class CostModel:
    """Task durations in seconds (or abstract units; the math is unit-free).

    Dual-forward compute is exactly 2x the stored single-forward time.
    Transfers are latency + bytes/bandwidth; disabling arena reuse charges an
    allocation penalty per upload.  AMP mode divides compute by amp_speedup
    while leaving wire time untouched (the bytes themselves come from the DAG).
    """

    single_forward: Mapping[str, float]
    update_compute: Mapping[str, float]
    upload_seconds_per_byte: float = 0.0
    offload_seconds_per_byte: float = 0.0
    latency: float = 0.0
    alloc_latency: float = 0.0
    arena_reuse: bool = True
    amp: bool = False
    amp_speedup: float = 8.0

    def compute_time(self, module: str) -> float:
        t = 2.0 * self.single_forward[module]
        return t / self.amp_speedup if self.amp else t

    def upload_time(self, nbytes: int) -> float:
        t = self.latency + nbytes * self.upload_seconds_per_byte
        if not self.arena_reuse:
            t += self.alloc_latency
        return t

    def offload_time(self, nbytes: int) -> float:
        return self.latency + nbytes * self.offload_seconds_per_byte

    def duration(self, task: TaskSpec) -> float:
        if task.lane is Lane.COMPUTE:
            if task.kind == "update":
                t = self.update_compute[task.module]
                return t / self.amp_speedup if self.amp else t
            return self.compute_time(task.module)
        if task.lane is Lane.UPLOAD:
            return self.upload_time(task.bytes)
        return self.offload_time(task.bytes)


def _forward_flops(spec: ModelSpec, batch_size: int) -> dict[str, float]:
    tokens = batch_size * spec.seq_len
    d = spec.dim
    block = 24.0 * tokens * d * d + 4.0 * batch_size * spec.seq_len**2 * d
    out = {EMBED_ID: float(tokens * d), HEAD_ID: 2.0 * tokens * d * spec.vocab}
    for i in range(spec.n_blocks):
        out[block_id(i)] = block
    return out


def module_param_counts(spec: ModelSpec) -> dict[str, int]:
    counts = {EMBED_ID: sum(math.prod(s) for _, s in embed_layout(spec)),
              HEAD_ID: sum(math.prod(s) for _, s in head_layout(spec))}
    per_block = sum(math.prod(s) for _, s in block_layout(spec))
    for i in range(spec.n_blocks):
        counts[block_id(i)] = per_block
    return counts


def cost_model_for_spec(spec: ModelSpec, batch_size: int, *,
                        flops_per_sec: float = 19.5e12,
                        h2d_bytes_per_sec: float = 25e9,
                        d2h_bytes_per_sec: float = 25e9,
                        latency: float = 30e-6,
                        alloc_latency: float = 0.0,
                        amp: bool = False,
                        amp_speedup: float = 8.0,
                        arena_reuse: bool = True) -> CostModel:
    """Cost model from byte/flop counting over a model preset."""
    flops = _forward_flops(spec, batch_size)
    params = module_param_counts(spec)
    return CostModel(
        single_forward={m: f / flops_per_sec for m, f in flops.items()},
        update_compute={m: 2.0 * params[m] / flops_per_sec for m in params},
        upload_seconds_per_byte=1.0 / h2d_bytes_per_sec,
        offload_seconds_per_byte=1.0 / d2h_bytes_per_sec,
        latency=latency,
        alloc_latency=alloc_latency,
        amp=amp,
        amp_speedup=amp_speedup,
        arena_reuse=arena_reuse,
    )


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

TaskFn = Callable[[], None]


def run_schedule(dag: TaskDag, backend: str = "simulated",
                 cost: CostModel | None = None,
                 task_fns: Mapping[str, TaskFn] | None = None) -> Timeline:
    """Execute the DAG and return its Timeline.

    simulated: closures (if any) run in deterministic topological order;
    start/end times come analytically from the cost model.
    threaded: one worker per lane, FIFO queues, completion events enforce the
    edges; times are wall clock.  Without closures, tasks sleep for their
    cost-model duration (pure scheduling runs).
    """
    if backend == "simulated":
        return _run_simulated(dag, cost, task_fns)
    if backend == "threaded":
        return _run_threaded(dag, cost, task_fns)
    raise ValueError(f"unknown backend {backend!r}")


def run_sequential(block_ids: list[str], cost: CostModel,
                   naive_update: bool = False,
                   wire_bytes: Mapping[str, int] | int = 0) -> Timeline:
    """No-concurrency baseline: strict per-block upload -> compute -> offload."""
    dag = build_iteration_dag(block_ids, k_slots=1, overlap=False,
                              naive_update=naive_update, wire_bytes=wire_bytes)
    return _run_simulated(dag, cost, None)


def topological_order(dag: TaskDag) -> list[TaskSpec]:
    """Kahn's algorithm, breaking ties by submission order (deterministic)."""
    indeg = {t.key: len(dag.preds(t.key)) for t in dag.tasks}
    seq = {t.key: i for i, t in enumerate(dag.tasks)}
    heap = [(seq[k], k) for k, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, key = heapq.heappop(heap)
        order.append(dag.by_key[key])
        for succ in dag.succs(key):
            indeg[succ] -= 1
            if indeg[succ] == 0:
                heapq.heappush(heap, (seq[succ], succ))
    if len(order) != len(dag.tasks):
        raise SchedulingContractError("dependency cycle in task DAG")
    return order


def _run_simulated(dag: TaskDag, cost: CostModel | None,
                   task_fns: Mapping[str, TaskFn] | None) -> Timeline:
    start: dict[str, float] = {}
    end: dict[str, float] = {}
    events = []
    for task in topological_order(dag):
        s = max((end[p] for p in dag.preds(task.key)), default=0.0)
        d = cost.duration(task) if cost is not None else 0.0
        start[task.key], end[task.key] = s, s + d
        if task_fns is not None:
            fn = task_fns.get(task.key)
            if fn is not None:
                fn()
        events.append(StreamEvent(task.lane, task.key, task.module, s, s + d))
    events.sort(key=lambda e: (e.t_start, e.key))
    return Timeline(events)


def _run_threaded(dag: TaskDag, cost: CostModel | None,
                  task_fns: Mapping[str, TaskFn] | None) -> Timeline:
    done = {t.key: threading.Event() for t in dag.tasks}
    abort = threading.Event()
    errors: list[BaseException] = []
    lane_events: dict[Lane, list[StreamEvent]] = {lane: [] for lane in Lane}
    lock = threading.Lock()

    def worker(lane: Lane):
        for task in dag.lane_tasks(lane):
            for p in dag.preds(task.key):
                while not done[p].wait(timeout=0.05):
                    if abort.is_set():
                        return
            if abort.is_set():
                return
            t0 = time.perf_counter()
            try:
                fn = task_fns.get(task.key) if task_fns else None
                if fn is not None:
                    fn()
                elif cost is not None:
                    d = cost.duration(task)
                    if d > 0:
                        time.sleep(d)
            except BaseException as exc:  # propagate to the caller, release waiters
                with lock:
                    errors.append(exc)
                abort.set()
                return
            t1 = time.perf_counter()
            lane_events[lane].append(StreamEvent(lane, task.key, task.module, t0, t1))
            done[task.key].set()

    threads = [threading.Thread(target=worker, args=(lane,), daemon=True)
               for lane in Lane]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    events = [e for lane in Lane for e in lane_events[lane]]
    events.sort(key=lambda e: (e.t_start, e.key))
    return Timeline(events)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class Violation:
    kind: str
    pred: str
    succ: str
    detail: str

    def __str__(self):
        return f"{self.kind}: {self.pred} -> {self.succ} ({self.detail})"


def validate_timeline(timeline: Timeline, dag: TaskDag,
                      tol: float = 1e-9) -> list[Violation]:
    """Empty list iff every dependency edge and lane-FIFO constraint holds."""
    by_key = timeline.by_key()
    violations = []
    for t in dag.tasks:
        if t.key not in by_key:
            violations.append(Violation("missing-event", t.key, t.key,
                                        "task produced no timeline event"))
    for pred, succ in dag.edges:
        if pred not in by_key or succ not in by_key:
            continue
        if by_key[succ].t_start + tol < by_key[pred].t_end:
            violations.append(Violation(
                "dependency", pred, succ,
                f"succ starts {by_key[succ].t_start:.9f} before pred ends "
                f"{by_key[pred].t_end:.9f}"))
    for lane in Lane:
        keys = [t.key for t in dag.lane_tasks(lane) if t.key in by_key]
        for a, b in zip(keys, keys[1:]):
            if by_key[b].t_start + tol < by_key[a].t_end:
                violations.append(Violation(
                    "lane-fifo", a, b,
                    f"{lane.value} lane tasks overlap"))
    return violations


# ---------------------------------------------------------------------------
# Throughput prediction over model presets
# ---------------------------------------------------------------------------

_CODEC_RATIO = {None: 1.0, "none": 1.0, "f16": 0.5, "bf16": 0.5, "f8": 0.25}


def predict_throughput(spec: ModelSpec, cost: CostModel, mode: str, *,
                       batch_size: int = 1, k_slots: int = 3,
                       naive_update: bool = False, overlap: bool = True,
                       codec: str | None = None) -> float:
    """Steady-state tokens/sec for one simulated iteration.

    mezo: all-resident compute only.  zo2: pipelined upload/compute/offload.
    zo2-amp: same pipeline with AMP compute speedup and codec-scaled wire
    bytes.  Reported numbers are comparable only as ratios (unit-free).
    """
    tokens = batch_size * spec.seq_len
    module_ids = [EMBED_ID] + [block_id(i) for i in range(spec.n_blocks)] + [HEAD_ID]
    if mode == "mezo":
        seconds = sum(cost.compute_time(m) for m in module_ids)
        return tokens / seconds
    if mode not in ("zo2", "zo2-amp"):
        raise ValueError(f"unknown throughput mode {mode!r}")

    cost = replace(cost, amp=(mode == "zo2-amp"))
    ratio = _CODEC_RATIO[codec]
    counts = module_param_counts(spec)
    base_elem = 4  # presets count F32 parameters on the wire
    wire = {m: int(counts[m] * base_elem * ratio) for m in counts}
    blocks = [block_id(i) for i in range(spec.n_blocks)]
    dag = build_iteration_dag(blocks, k_slots=k_slots, overlap=overlap,
                              naive_update=naive_update, wire_bytes=wire)
    timeline = _run_simulated(dag, cost, None)
    return tokens / timeline.makespan
