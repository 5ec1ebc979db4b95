"""Reference monolithic zeroth-order optimizer.

One iteration is the classic dual-forward recipe over the whole model:
perturb every parameter by +eps*z, evaluate; rewind the generator and apply
-2*eps*z, evaluate; rewind and restore with +eps*z; form the scalar projected
gradient g = (l+ - l-) / (2*eps); rewind once more and descend along the SAME
z: theta -= lr * g * z.  No gradient of parameter shape ever exists; z is
regenerated from the captured state, never stored.

This engine is deliberately single-threaded and single-tier.  It is the
bit-exactness oracle the block-wise engine is measured against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonFiniteLossError
from .model import ModelParams, axpy
from .numerics import BATCH_STREAM, PERTURB_STREAM, RngState, derive_step_seed, gaussian_fill, raw_uint64

TraceFn = Callable[[dict], None]


@dataclass(frozen=True)
class ZOConfig:
    eps: float
    lr: float
    steps: int
    seed: int

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def step_perturb_state(seed: int, step_index: int) -> RngState:
    return RngState(derive_step_seed(seed, step_index), PERTURB_STREAM, 0)


def batch_for_step(seed: int, step_index: int, n_samples: int,
                   batch_size: int) -> np.ndarray:
    """Per-step batch indices; disjoint stream from the perturbation draws."""
    if n_samples < 1:
        raise ValueError("cannot sample from an empty dataset")
    state = RngState(derive_step_seed(seed, step_index), BATCH_STREAM, 0)
    raw, _ = raw_uint64(state, batch_size)
    return (raw % np.uint64(n_samples)).astype(np.int64)


def perturb_all(params: ModelParams, eps: float, state: RngState,
                trace: TraceFn | None = None, op: str = "perturb") -> RngState:
    """theta += eps * z over every bucket in canonical whole-model order.

    eps may be negative (the -2*eps pass).  Consumes exactly total-param draws
    from `state` and returns the advanced state.
    """
    for module, bucket in params.buckets():
        if bucket.size == 0:
            continue
        if trace is not None:
            trace({"op": op, "module": module, "coef": eps,
                   "state": (state.seed, state.stream, state.counter)})
        z, state = gaussian_fill(state, bucket.size)
        axpy(bucket.flat, eps, z)
    return state


def update_all(params: ModelParams, scale: float, state: RngState,
               trace: TraceFn | None = None) -> RngState:
    return perturb_all(params, scale, state, trace, op="update")


class RefEngine:
    """Monolithic optimizer over a workload (anything exposing .params-style
    canonical buckets via ModelParams and .evaluate(batch) -> loss).
    """

    def __init__(self, workload, cfg: ZOConfig, trace: TraceFn | None = None):
        self.workload = workload
        self.cfg = cfg
        self.trace = trace
        self.losses: list[float] = []

    @property
    def params(self) -> ModelParams:
        return self.workload.params

    def step(self, batch, step_index: int) -> float:
        """One dual-forward iteration; returns the projected gradient g."""
        cfg = self.cfg
        rs = step_perturb_state(cfg.seed, step_index)
        perturb_all(self.params, cfg.eps, rs, self.trace)
        l_plus = self.workload.evaluate(batch)
        perturb_all(self.params, -2.0 * cfg.eps, rs, self.trace)
        l_minus = self.workload.evaluate(batch)
        perturb_all(self.params, cfg.eps, rs, self.trace)
        if not (math.isfinite(l_plus) and math.isfinite(l_minus)):
            raise NonFiniteLossError(
                f"step {step_index}: l+={l_plus}, l-={l_minus}")
        g = (l_plus - l_minus) / (2.0 * cfg.eps)
        update_all(self.params, -(cfg.lr * g), rs, self.trace)
        self.losses.append(l_plus)
        return g

    def train(self, dataset, steps: int | None = None) -> list[float]:
        """Run T steps with the shared per-step batch schedule."""
        steps = self.cfg.steps if steps is None else steps
        for j in range(steps):
            idx = batch_for_step(self.cfg.seed, j, dataset.n_samples,
                                 dataset.batch_size)
            self.step(dataset.batch(idx), j)
        return self.losses


def train_ref(params_workload, dataset, cfg: ZOConfig):
    """Functional wrapper: train and return (params, per-step losses)."""
    engine = RefEngine(params_workload, cfg)
    losses = engine.train(dataset)
    return engine.params, losses
