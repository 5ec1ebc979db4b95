"""Block-disaggregated dual-forward optimizer with deferred scalar updates.

The whole-model dual-forward is split into per-module passes so each
transformer block can live on the host and visit the device once per
iteration.  Correctness hinges on the RNG state manager: the state captured
before a module's perturbation (rs) is the only thing needed to regenerate
its z, so iteration j's update for a module is applied with iteration j-1's
captured state (lrs) right before iteration j's perturbation of that module.
One upload + one offload per block per iteration covers perturb, forward,
restore AND last iteration's descent step.

Because the per-element operation sequence (+eps*z, -2eps*z, +eps*z, then
-lr*g*z with the same z) is identical to the monolithic engine's, results are
bit-exact once finalize() drains the last pending update.  The update is
gated on g != 0 exactly as stated upstream; a legitimately zero projected
gradient therefore skips one no-op update, which is byte-identical to
applying it except for parameters that are exactly -0.0 at that instant.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import NonFiniteLossError, StateCorruptionError, SchedulingContractError
from .model import axpy
from .numerics import PERTURB_STREAM, RngState, derive_step_seed, gaussian_fill
from .runtime import OffloadRuntime
from .scheduler import (CostModel, Timeline, build_iteration_dag, run_schedule,
                        validate_timeline)
from .zo_ref import ZOConfig, batch_for_step


@dataclass
class PendingGradient:
    """The engine-wide gradient store: one scalar, nothing of parameter shape."""

    g: float = 0.0
    valid: bool = False

    def set(self, g: float) -> None:
        self.g = float(g)
        self.valid = g != 0.0

    def clear(self) -> None:
        self.g = 0.0
        self.valid = False


@dataclass
class _RsbEntry:
    step: int
    module: str
    state: RngState


class RngStateManager:
    """Bookkeeping that keeps perturbation and update draws identical.

    rsb is a FIFO of per-module pre-perturbation states pushed in visitation
    order; during iteration j the front still holds iteration j-1's entries,
    which pop out in the same order (lrs).  lrs_map snapshots the newest state
    per module for the final drain.  Misalignment is fatal, never silent.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self.rsb: deque[_RsbEntry] = deque()
        self.lrs_map: dict[str, RngState] = {}
        self.storage: dict[int, RngState] = {}
        self.current_seed: int | None = None

    def begin_iteration(self, step_seed: int) -> None:
        self.current_seed = step_seed
        self.set_state(step_seed, RngState(step_seed, PERTURB_STREAM, 0))

    def set_state(self, seed: int, state: RngState) -> None:
        self.storage[seed] = state

    def get_state(self, seed: int | None = None) -> RngState:
        return self.storage[self.current_seed if seed is None else seed]

    def push_rs(self, step: int, module: str, state: RngState) -> None:
        self.rsb.append(_RsbEntry(step, module, state))
        self.lrs_map[module] = state

    def _pop(self, module: str) -> RngState:
        entry = self.rsb.popleft()
        if entry.module != module:
            raise StateCorruptionError(
                f"rsb misaligned: expected {module}, found {entry.module} "
                f"from step {entry.step}")
        return entry.state

    def pop_backlog(self, module: str, current_step: int) -> RngState | None:
        """Previous iteration's state for this module, if one is queued."""
        if self.rsb and self.rsb[0].step < current_step:
            return self._pop(module)
        return None

    def pop_current(self, module: str, current_step: int) -> RngState:
        """Same-iteration state (naive update-after-forward mode)."""
        if not self.rsb or self.rsb[0].step != current_step:
            raise StateCorruptionError(
                f"no state recorded for {module} in step {current_step}")
        return self._pop(module)


class Zo2Engine:
    """Drives the workload module-by-module through the offload runtime.

    update_mode "deferred" applies iteration j-1's update inside iteration
    j's dual forward (one transfer cycle per block); "naive" re-uploads every
    block after g is known (two cycles, kept for the ablation).  Either way
    this engine never allocates a parameter-shaped gradient.
    """

    def __init__(self, workload, cfg: ZOConfig, runtime: OffloadRuntime, *,
                 overlap: bool = True, backend: str = "threaded",
                 update_mode: str = "deferred", cost: CostModel | None = None,
                 trace=None, validate: bool = True):
        if update_mode not in ("deferred", "naive"):
            raise ValueError(f"unknown update_mode {update_mode!r}")
        if overlap and runtime.k_slots < 3:
            raise ValueError("overlap requires at least 3 arena slots")
        self.workload = workload
        self.cfg = cfg
        self.runtime = runtime
        self.overlap = overlap
        self.backend = backend
        self.update_mode = update_mode
        self.cost = cost
        self.trace = trace
        self.validate = validate

        self.mgr = RngStateManager(cfg.seed)
        self.pending = PendingGradient()
        self.losses: list[float] = []
        self.gs: list[float] = []
        self.timelines: list[tuple[int, Timeline]] = []
        self._handles = {h.module: h for h in workload.modules()}
        self._order = [h.module for h in workload.modules()]
        self._blocks = [m for m in self._order if self._handles[m].transferable]
        self._ctx: dict = {}

        stash_bytes = getattr(workload, "tied_stash_bytes", 0)
        if stash_bytes:
            runtime.pool.alloc("tied_snapshots", stash_bytes)

    # -- elementwise primitives (shared expression shapes with the reference) --

    def _emit(self, op: str, module: str, coef: float, state: RngState) -> None:
        if self.trace is not None:
            self.trace({"op": op, "module": module, "coef": coef,
                        "state": (state.seed, state.stream, state.counter)})

    def _perturb(self, module: str, bucket, coef: float, state: RngState) -> None:
        if bucket.size == 0:
            return
        self._emit("perturb", module, coef, state)
        z, _ = gaussian_fill(state, bucket.size)
        axpy(bucket.flat, coef, z)

    def _update_flat(self, module: str, flat: np.ndarray, state: RngState) -> None:
        if flat.size == 0:
            return
        scale = -(self.cfg.lr * self.pending.g)
        self._emit("update", module, scale, state)
        z, _ = gaussian_fill(state, flat.size)
        axpy(flat, scale, z)

    # -- per-module dual forward (deferred update inside) ----------------------

    def _stash(self, module: str, sign: int) -> None:
        stash = getattr(self.workload, "stash", None)
        if stash is not None:
            stash(module, sign)

    def dual_forward(self, module: str, bucket, in_plus, in_minus, step: int,
                     eps: float | None = None):
        """Update-with-lrs (if pending), then +eps / -2eps / +eps around the
        two forwards, then capture the advanced state for the next module."""
        eps = self.cfg.eps if eps is None else eps
        rs = self.mgr.get_state()
        lrs = self.mgr.pop_backlog(module, step)
        if self.pending.valid:
            if lrs is None:
                raise StateCorruptionError(
                    f"pending update for {module} but no saved state (lrs)")
            self._update_flat(module, bucket.flat, lrs)
        self.mgr.push_rs(step, module, rs)
        self._perturb(module, bucket, eps, rs)
        self._stash(module, +1)
        out_plus = self.workload.forward(module, bucket, in_plus, sign=+1)
        self._perturb(module, bucket, -2.0 * eps, rs)
        self._stash(module, -1)
        out_minus = self.workload.forward(module, bucket, in_minus, sign=-1)
        self._perturb(module, bucket, eps, rs)
        self.mgr.set_state(rs.seed, rs.advanced(bucket.size))
        return out_plus, out_minus

    def _module_bucket(self, module: str):
        handle = self._handles[module]
        if not handle.transferable:
            return handle.bucket
        slot = self.runtime.slot_for(self._blocks.index(module))
        return self.runtime.slot_bucket(slot)

    def _compute_module(self, module: str, step: int, batch) -> None:
        ctx = self._ctx
        bucket = self._module_bucket(module)
        start = np.asarray(self.workload.start_input(batch))
        bsz = start.shape[0] if start.ndim else 1
        out_bytes = 2 * self.workload.activation_bytes(module, bsz)
        self.runtime.pool.alloc("activations", out_bytes)
        if self.update_mode == "naive":
            rs = self.mgr.get_state()
            self.mgr.push_rs(step, module, rs)
            eps = self.cfg.eps
            self._perturb(module, bucket, eps, rs)
            self._stash(module, +1)
            out_plus = self.workload.forward(module, bucket, ctx["in_plus"], sign=+1)
            self._perturb(module, bucket, -2.0 * eps, rs)
            self._stash(module, -1)
            out_minus = self.workload.forward(module, bucket, ctx["in_minus"], sign=-1)
            self._perturb(module, bucket, eps, rs)
            self.mgr.set_state(rs.seed, rs.advanced(bucket.size))
        else:
            out_plus, out_minus = self.dual_forward(
                module, bucket, ctx["in_plus"], ctx["in_minus"], step)
        self.runtime.pool.free("activations", ctx.pop("in_bytes", 0))
        ctx["in_plus"], ctx["in_minus"] = out_plus, out_minus
        ctx["in_bytes"] = out_bytes

        if module == self._order[-1]:
            l_plus = self.workload.final_loss(out_plus, batch)
            l_minus = self.workload.final_loss(out_minus, batch)
            if not (math.isfinite(l_plus) and math.isfinite(l_minus)):
                raise NonFiniteLossError(
                    f"step {step}: l+={l_plus}, l-={l_minus}")
            ctx["l_plus"], ctx["l_minus"] = l_plus, l_minus
            ctx["g"] = (l_plus - l_minus) / (2.0 * self.cfg.eps)
            self.runtime.pool.free("activations", ctx.pop("in_bytes"))
            ctx.pop("in_plus")
            ctx.pop("in_minus")

    def _naive_update_module(self, module: str, step: int) -> None:
        bucket = self._module_bucket(module)
        rs = self.mgr.pop_current(module, step)
        # Plain update-after-forward applies unconditionally (no g gate);
        # pending holds this iteration's g during phase 2 only.
        if bucket.size:
            scale = -(self.cfg.lr * self._ctx["g"])
            self._emit("update", module, scale, rs)
            z, _ = gaussian_fill(rs, bucket.size)
            axpy(bucket.flat, scale, z)

    # -- one iteration ---------------------------------------------------------

    def step(self, batch, step_index: int) -> float:
        """Visit embedding, blocks, head in order through the scheduler."""
        cfg = self.cfg
        self.runtime.current_step = step_index
        self.mgr.begin_iteration(derive_step_seed(cfg.seed, step_index))
        self._ctx = {"in_plus": self.workload.start_input(batch),
                     "in_minus": self.workload.start_input(batch)}

        tokens, targets = batch
        io_bytes = np.asarray(tokens).nbytes + np.asarray(targets).nbytes
        self.runtime.pool.alloc("io", io_bytes)

        naive = self.update_mode == "naive"
        wire = {b: self.runtime.host[b].nbytes for b in self._blocks}
        dag = build_iteration_dag(self._blocks, k_slots=self.runtime.k_slots,
                                  overlap=self.overlap, naive_update=naive,
                                  wire_bytes=wire, embed_id=self._order[0],
                                  head_id=self._order[-1])
        fns = {f"C:{m}": partial(self._compute_module, m, step_index, batch)
               for m in self._order}
        for i, b in enumerate(self._blocks):
            slot = self.runtime.slot_for(i)
            fns[f"U:{b}"] = partial(self.runtime.upload, b, slot, step_index)
            fns[f"O:{b}"] = partial(self.runtime.offload, b, slot, step_index)
            if naive:
                fns[f"U2:{b}"] = partial(self.runtime.upload, b, slot, step_index)
                fns[f"O2:{b}"] = partial(self.runtime.offload, b, slot, step_index)
        if naive:
            for m in self._order:
                fns[f"C2:{m}"] = partial(self._naive_update_module, m, step_index)

        timeline = run_schedule(dag, backend=self.backend, cost=self.cost,
                                task_fns=fns)
        if self.validate:
            violations = validate_timeline(timeline, dag)
            if violations:
                raise SchedulingContractError(
                    "; ".join(str(v) for v in violations[:5]))
        self.timelines.append((step_index, timeline))
        self.runtime.pool.free("io", io_bytes)

        g = self._ctx["g"]
        if naive:
            self.pending.clear()
        else:
            self.pending.set(g)
        expected = 0 if naive else len(self._order)
        if len(self.mgr.rsb) != expected:
            raise StateCorruptionError(
                f"rsb holds {len(self.mgr.rsb)} entries, expected {expected}")
        self.losses.append(self._ctx["l_plus"])
        self.gs.append(g)
        return g

    def finalize(self):
        """Drain the last pending update so T steps here equal T monolithic
        steps exactly.  Idempotent: a second call is the identity."""
        if self.pending.valid:
            for module in self._order:
                handle = self._handles[module]
                if handle.bucket.size == 0:
                    continue
                lrs = self.mgr.lrs_map.get(module)
                if lrs is None:
                    raise StateCorruptionError(f"finalize: no lrs for {module}")
                if handle.transferable:
                    self.runtime.host[module].apply(
                        partial(self._update_flat, module, state=lrs))
                else:
                    self._update_flat(module, handle.bucket.flat, lrs)
        self.pending.clear()
        self.mgr.rsb.clear()
        return self.runtime.export_params()

    def train(self, dataset, steps: int | None = None) -> list[float]:
        steps = self.cfg.steps if steps is None else steps
        for j in range(steps):
            idx = batch_for_step(self.cfg.seed, j, dataset.n_samples,
                                 dataset.batch_size)
            self.step(dataset.batch(idx), j)
        self.finalize()
        return self.losses
