"""Shared fakes: engine-compatible workloads that are not transformers."""

from __future__ import annotations

import numpy as np
import pytest

from zo2lab.model import BlockBucket, ModuleHandle
from zo2lab.numerics import ElemFormat


class VectorParams:
    """Bucket container with the same canonical-iteration surface as
    ModelParams: first and last modules resident, the rest transferable."""

    def __init__(self, sizes: dict[str, int], fmt: ElemFormat = ElemFormat.F64):
        self.fmt = fmt
        self._order = list(sizes)
        self._buckets = {
            name: BlockBucket.build([(f"{name}_w", (n,))] if n else [], fmt)
            for name, n in sizes.items()
        }

    def buckets(self):
        return [(name, self._buckets[name]) for name in self._order]

    def bucket(self, module: str) -> BlockBucket:
        return self._buckets[module]

    def total_params(self) -> int:
        return sum(b.size for b in self._buckets.values())


class ChainLossWorkload:
    """Loss flows through the activation chain: each module adds its own
    contribution to a running scalar, so the block-wise engine sees each
    module's perturbed parameters at exactly the moment they matter (the
    monolithic engine evaluates the same sum over live buckets).
    """

    def __init__(self, params: VectorParams, module_loss):
        self.params = params
        self.module_loss = module_loss

    def modules(self):
        order = [name for name, _ in self.params.buckets()]
        return [ModuleHandle(name, self.params.bucket(name),
                             name not in (order[0], order[-1]))
                for name in order]

    def start_input(self, batch):
        return np.float64(0.0)

    def forward(self, module, bucket, x, sign=1):
        return x + self.module_loss(module, bucket)

    def final_loss(self, out, batch):
        return float(out)

    def evaluate(self, batch):
        return float(sum(self.module_loss(m, b) for m, b in self.params.buckets()))

    def activation_bytes(self, module, batch_size):
        return 8


def quadratic_workload(sizes: dict[str, int], target: float = 0.0,
                       fmt: ElemFormat = ElemFormat.F64) -> ChainLossWorkload:
    """Sum over modules of 0.5 * ||theta_m - target||^2."""
    params = VectorParams(sizes, fmt)

    def module_loss(module, bucket):
        if bucket.size == 0:
            return 0.0
        return 0.5 * float(((bucket.flat - target) ** 2).sum())

    return ChainLossWorkload(params, module_loss)


class ScriptedLossWorkload:
    """Returns pre-scripted loss values regardless of parameters."""

    def __init__(self, sizes: dict[str, int], values: list[float],
                 fmt: ElemFormat = ElemFormat.F64):
        self.params = VectorParams(sizes, fmt)
        self.values = list(values)

    def modules(self):
        order = [name for name, _ in self.params.buckets()]
        return [ModuleHandle(name, self.params.bucket(name),
                             name not in (order[0], order[-1]))
                for name in order]

    def start_input(self, batch):
        return np.float64(0.0)

    def forward(self, module, bucket, x, sign=1):
        return x

    def final_loss(self, out, batch):
        return self.values.pop(0)

    def evaluate(self, batch):
        return self.values.pop(0)

    def activation_bytes(self, module, batch_size):
        return 8


@pytest.fixture
def dummy_batch():
    return (np.zeros(1, dtype=np.int64), np.zeros(1, dtype=np.int64))
