"""Toy decoder-only transformer with per-block contiguous parameter buckets.

Each module's parameters live in one flat allocation (a bucket) with a frozen
segment table, so a whole block moves between memory tiers as a single copy
and both optimizer engines consume random draws for it in the same order.
The block internals are the plainest standard choice (pre-norm attention +
GELU MLP); what matters here is the bucket granularity, not the architecture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .numerics import INIT_STREAM, ElemFormat, RngState, TensorBuf, gaussian_fill

LN_EPS = 1e-5

EMBED_ID = "embed"
HEAD_ID = "head"


def block_id(i: int) -> str:
    return f"block.{i}"


@dataclass(frozen=True)
class ModelSpec:
    n_blocks: int
    dim: int
    n_heads: int
    vocab: int
    seq_len: int
    tie_lm_head: bool = False

    def __post_init__(self):
        for name in ("n_blocks", "dim", "n_heads", "vocab", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelSpec.{name} must be >= 1")
        if self.dim % self.n_heads != 0:
            raise ValueError(
                f"dim {self.dim} not divisible by n_heads {self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass
class BlockBucket:
    """One module's parameters in a single contiguous buffer.

    Segments tile the buffer exactly (no gaps, no overruns) in a canonical
    order that is identical across blocks and across both engines.
    """

    buf: TensorBuf
    segments: tuple[Segment, ...]

    def __post_init__(self):
        offset = 0
        for seg in self.segments:
            if seg.offset != offset:
                raise ValueError(
                    f"segment {seg.name} at offset {seg.offset}, expected {offset}"
                )
            offset += seg.size
        if offset != self.buf.data.size:
            raise ValueError(
                f"segments cover {offset} elements, buffer has {self.buf.data.size}"
            )

    @property
    def size(self) -> int:
        return self.buf.data.size

    @property
    def nbytes(self) -> int:
        return self.buf.nbytes

    @property
    def flat(self) -> np.ndarray:
        return self.buf.data

    def view(self, name: str) -> np.ndarray:
        for seg in self.segments:
            if seg.name == name:
                return self.buf.data[seg.offset:seg.offset + seg.size].reshape(seg.shape)
        raise KeyError(f"no segment named {name!r}")

    @classmethod
    def build(cls, layout: list[tuple[str, tuple[int, ...]]], fmt: ElemFormat) -> "BlockBucket":
        segments, offset = [], 0
        for name, shape in layout:
            segments.append(Segment(name, offset, tuple(shape)))
            offset += math.prod(shape)
        if offset:
            buf = TensorBuf(np.zeros(offset, dtype=fmt.storage_dtype), (offset,), fmt)
        else:
            # zero-size bucket (tied LM head) bypasses TensorBuf shape validation
            buf = _empty_buf(fmt)
        return cls(buf, tuple(segments))


def _empty_buf(fmt: ElemFormat) -> TensorBuf:
    buf = TensorBuf.__new__(TensorBuf)
    buf.data = np.zeros(0, dtype=fmt.storage_dtype)
    buf.shape = (0,)
    buf.fmt = fmt
    return buf


def embed_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    # learned positional embeddings live with the token table (device-resident)
    return [("tok_emb", (spec.vocab, spec.dim)), ("pos_emb", (spec.seq_len, spec.dim))]


def block_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    d = spec.dim
    return [
        ("ln1_g", (d,)), ("ln1_b", (d,)),
        ("qkv_w", (d, 3 * d)), ("qkv_b", (3 * d,)),
        ("attn_out_w", (d, d)), ("attn_out_b", (d,)),
        ("ln2_g", (d,)), ("ln2_b", (d,)),
        ("mlp_in_w", (d, 4 * d)), ("mlp_in_b", (4 * d,)),
        ("mlp_out_w", (4 * d, d)), ("mlp_out_b", (d,)),
    ]


def head_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    if spec.tie_lm_head:
        return []  # weight shared with the embedding table: one storage, two roles
    return [("head_w", (spec.vocab, spec.dim))]


def param_count(spec: ModelSpec) -> int:
    total = sum(math.prod(s) for _, s in embed_layout(spec))
    total += spec.n_blocks * sum(math.prod(s) for _, s in block_layout(spec))
    total += sum(math.prod(s) for _, s in head_layout(spec))
    return total


@dataclass
class ModelParams:
    spec: ModelSpec
    embedding: BlockBucket
    blocks: list[BlockBucket]
    lm_head: BlockBucket
    fmt: ElemFormat = ElemFormat.F64

    def buckets(self) -> list[tuple[str, BlockBucket]]:
        """Canonical whole-model order: embedding, blocks 1..N, head."""
        out = [(EMBED_ID, self.embedding)]
        out += [(block_id(i), b) for i, b in enumerate(self.blocks)]
        out.append((HEAD_ID, self.lm_head))
        return out

    def bucket(self, module: str) -> BlockBucket:
        if module == EMBED_ID:
            return self.embedding
        if module == HEAD_ID:
            return self.lm_head
        return self.blocks[int(module.split(".", 1)[1])]

    def total_params(self) -> int:
        return sum(b.size for _, b in self.buckets())


HEAD_INIT_SCALE = 0.2


def _init_std(name: str, shape: tuple[int, ...], dim: int) -> float:
    # fan-in scaled weights; the head starts small so untrained loss sits
    # near ln(vocab) while its gradient (which scales with h, not with the
    # head itself) stays strong enough for zeroth-order training
    if name == "head_w":
        return HEAD_INIT_SCALE / math.sqrt(dim)
    if name in ("tok_emb", "pos_emb"):
        return 1.0 / math.sqrt(dim)
    return 1.0 / math.sqrt(shape[0])


def init_params(spec: ModelSpec, state: RngState,
                fmt: ElemFormat = ElemFormat.F64) -> ModelParams:
    """Deterministic init: per-segment scaled Gaussian weights, unit norm
    gains, zero biases.

    Draws come from the init stream of the given state, consumed segment by
    segment in canonical order, so identical states give byte-identical params.
    """
    if not fmt.is_arithmetic:
        raise ValueError("parameters must be stored in an arithmetic format")
    state = RngState(state.seed, INIT_STREAM, state.counter)
    embedding = BlockBucket.build(embed_layout(spec), fmt)
    blocks = [BlockBucket.build(block_layout(spec), fmt) for _ in range(spec.n_blocks)]
    lm_head = BlockBucket.build(head_layout(spec), fmt)
    params = ModelParams(spec, embedding, blocks, lm_head, fmt)
    for _, bucket in params.buckets():
        for seg in bucket.segments:
            view = bucket.view(seg.name)
            if seg.name.endswith("_g"):
                view[...] = 1.0
            elif seg.name.endswith("_b"):
                view[...] = 0.0
            else:
                std = _init_std(seg.name, seg.shape, spec.dim)
                z, state = gaussian_fill(state, seg.size)
                view[...] = (std * z).reshape(seg.shape).astype(fmt.storage_dtype)
    return params


def axpy(flat: np.ndarray, coef: float, z: np.ndarray) -> None:
    """flat += coef * z, the one arithmetic expression both engines share.

    Perturbation and update must be the exact same floating-point operation in
    the monolithic and block-wise engines or bit equality is unattainable.
    """
    np.add(flat, coef * z, out=flat, casting="same_kind")


# ---------------------------------------------------------------------------
# Forward pass (pure functions of bucket contents and inputs)
# ---------------------------------------------------------------------------


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + x.dtype.type(LN_EPS)) * g + b


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(x.dtype.type(2.0))))


def forward_embedding(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    """(batch, seq) token ids -> (batch, seq, dim) hidden states."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] > params.spec.seq_len:
        raise ValueError(f"tokens shape {tokens.shape} invalid for seq_len "
                         f"{params.spec.seq_len}")
    if tokens.min() < 0 or tokens.max() >= params.spec.vocab:
        raise ValueError("token id out of range")
    tok = params.embedding.view("tok_emb")
    pos = params.embedding.view("pos_emb")
    return tok[tokens] + pos[: tokens.shape[1]]


def forward_block(bucket: BlockBucket, h: np.ndarray, n_heads: int) -> np.ndarray:
    """Pre-norm attention + MLP residual block; shape-preserving and pure."""
    bsz, seq, dim = h.shape
    if dim % n_heads != 0:
        raise ValueError("hidden width not divisible by head count")
    hd = dim // n_heads

    x = _layer_norm(h, bucket.view("ln1_g"), bucket.view("ln1_b"))
    qkv = x @ bucket.view("qkv_w") + bucket.view("qkv_b")
    q, k, v = np.split(qkv, 3, axis=-1)
    q = q.reshape(bsz, seq, n_heads, hd).transpose(0, 2, 1, 3)
    k = k.reshape(bsz, seq, n_heads, hd).transpose(0, 2, 1, 3)
    v = v.reshape(bsz, seq, n_heads, hd).transpose(0, 2, 1, 3)
    scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(h.dtype.type(hd))
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    scores = np.where(causal, scores, h.dtype.type(-np.inf))
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    ctx = (w @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, dim)
    h = h + (ctx @ bucket.view("attn_out_w") + bucket.view("attn_out_b"))

    x = _layer_norm(h, bucket.view("ln2_g"), bucket.view("ln2_b"))
    y = _gelu(x @ bucket.view("mlp_in_w") + bucket.view("mlp_in_b"))
    return h + (y @ bucket.view("mlp_out_w") + bucket.view("mlp_out_b"))


def forward_head(params: ModelParams, h: np.ndarray,
                 weight: np.ndarray | None = None) -> np.ndarray:
    """(batch, seq, dim) -> (batch, seq, vocab) logits.

    weight overrides the projection matrix (tied mode hands in a snapshot of
    the embedding taken at the matching perturbation sign).
    """
    if weight is None:
        weight = params.embedding.view("tok_emb") if params.spec.tie_lm_head \
            else params.lm_head.view("head_w")
    return h @ weight.T


def loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean cross-entropy over batch x seq, accumulated in F64."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    lg = logits.astype(np.float64, copy=False)
    m = lg.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(lg - m).sum(axis=-1))
    picked = np.take_along_axis(lg, targets[..., None], axis=-1)[..., 0]
    return float((lse - picked).mean())


def full_loss(params: ModelParams, tokens: np.ndarray, targets: np.ndarray) -> float:
    h = forward_embedding(params, tokens)
    for b in params.blocks:
        h = forward_block(b, h, params.spec.n_heads)
    return loss(forward_head(params, h), targets)


# ---------------------------------------------------------------------------
# Workload adapter consumed by both optimizer engines
# ---------------------------------------------------------------------------


@dataclass
class ModuleHandle:
    module: str
    bucket: BlockBucket
    transferable: bool   # blocks move between tiers; embed/head stay on device


@dataclass
class TransformerWorkload:
    """Adapter the engines drive: canonical module sequence, per-module
    forward, and the loss.  Batches are (tokens, targets) index pairs.

    With tied weights the block-wise engine restores the embedding before the
    head ever runs, so stash() retains byte copies of the +eps and -eps token
    tables; the head's paired forwards then see exactly the matrices the
    monolithic pass would.
    """

    params: ModelParams

    def __post_init__(self):
        self._tied_stash: dict[int, np.ndarray] = {}

    def modules(self) -> list[ModuleHandle]:
        out = []
        for module, bucket in self.params.buckets():
            out.append(ModuleHandle(module, bucket, module not in (EMBED_ID, HEAD_ID)))
        return out

    def start_input(self, batch) -> np.ndarray:
        tokens, _ = batch
        return np.asarray(tokens)

    @property
    def tied_stash_bytes(self) -> int:
        if not self.params.spec.tie_lm_head:
            return 0
        return 2 * self.params.embedding.view("tok_emb").nbytes

    def stash(self, module: str, sign: int) -> None:
        if self.params.spec.tie_lm_head and module == EMBED_ID:
            self._tied_stash[sign] = self.params.embedding.view("tok_emb").copy()

    def forward(self, module: str, bucket: BlockBucket, x: np.ndarray,
                sign: int = 1) -> np.ndarray:
        if module == EMBED_ID:
            return forward_embedding(self.params, x)
        if module == HEAD_ID:
            return forward_head(self.params, x, self._tied_stash.get(sign))
        return forward_block(bucket, x, self.params.spec.n_heads)

    def final_loss(self, logits: np.ndarray, batch) -> float:
        _, targets = batch
        return loss(logits, np.asarray(targets))

    def evaluate(self, batch) -> float:
        """Whole-model loss at the current bucket contents (monolithic path)."""
        tokens, targets = batch
        return full_loss(self.params, np.asarray(tokens), np.asarray(targets))

    def activation_bytes(self, module: str, batch_size: int) -> int:
        """Output activation bytes a module materializes for ONE forward."""
        spec = self.params.spec
        esize = self.params.fmt.bytes_per_elem
        width = spec.vocab if module == HEAD_ID else spec.dim
        return batch_size * spec.seq_len * width * esize
