"""Deterministic synthetic token datasets with a learnable pattern."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import UsageError
from ..numerics import DATA_STREAM, RngState, raw_uint64

# next-token rule for the affine pattern: t' = (A*t + B) mod vocab
AFFINE_A = 5
AFFINE_B = 3


@dataclass
class TokenDataset:
    tokens: np.ndarray    # (n_samples, seq_len) int64
    targets: np.ndarray   # (n_samples, seq_len) int64
    batch_size: int = 1

    @property
    def n_samples(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def batch(self, indices: np.ndarray):
        return self.tokens[indices], self.targets[indices]


def gen_synthetic(vocab: int, seq_len: int, n_samples: int, state: RngState,
                  pattern: str = "affine", batch_size: int = 1) -> TokenDataset:
    """Token sequences whose targets follow a learnable rule.

    affine: sequences iterate t' = (A*t + B) mod vocab from a random start and
    the target is the next token.  copy: tokens are iid and the target is the
    current token.  Either rule is a pure token-to-token map, so even a tiny
    model can push the loss below ln(vocab).
    """
    if n_samples < 1:
        raise UsageError("n_samples: dataset must not be empty")
    if pattern not in ("affine", "copy"):
        raise UsageError(f"pattern: unknown pattern {pattern!r}")
    state = RngState(state.seed, DATA_STREAM, state.counter)

    if pattern == "copy":
        raw, _ = raw_uint64(state, n_samples * seq_len)
        tokens = (raw % np.uint64(vocab)).astype(np.int64).reshape(n_samples, seq_len)
        targets = tokens.copy()
        return TokenDataset(tokens, targets, batch_size)

    raw, _ = raw_uint64(state, n_samples)
    start = (raw % np.uint64(vocab)).astype(np.int64)
    seq = np.empty((n_samples, seq_len + 1), dtype=np.int64)
    seq[:, 0] = start
    for t in range(seq_len):
        seq[:, t + 1] = (AFFINE_A * seq[:, t] + AFFINE_B) % vocab
    return TokenDataset(seq[:, :-1].copy(), seq[:, 1:].copy(), batch_size)
