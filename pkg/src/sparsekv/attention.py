"""Tiled attention over mixed dense / N:M sparse KV blocks.

Both GEMMs run transposed so the caches sit in the left (sparse-capable)
operand slot::

    S^T = K_j  x Q_i^T        (block_len x rows)
    O^T += V_j^T x P^T        (d x rows)

A sparse left operand is multiplied straight from its kept values and position
codes, touching only the stored non-zeros. Softmax is streamed per key block
with a running max and running sum, as in flash attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from .compressor import CompressedCache, measure_size
from .core import ACC_DTYPE, WORK_DTYPE, GroupMetadata, positions_from_meta
from .pruner import KEY, VALUE

Cache = Union[CompressedCache, np.ndarray]
PREFILL = "prefill"
DECODE = "decode"


class SparseOperand(NamedTuple):
    nnz: np.ndarray
    positions: np.ndarray  # absolute column of each stored value

    @classmethod
    def from_meta(cls, nnz: np.ndarray, meta: GroupMetadata, full_cols: int) -> SparseOperand:
        return cls(nnz, positions_from_meta(meta, nnz.shape[0], full_cols))


Operand = Union[np.ndarray, SparseOperand]


def _sparse_matmul(op: SparseOperand, dense: np.ndarray) -> np.ndarray:
    gathered = dense[op.positions].astype(ACC_DTYPE)  # (rows, kept, n)
    out = np.matmul(op.nnz.astype(ACC_DTYPE)[:, None, :], gathered)[:, 0, :]
    return out.astype(WORK_DTYPE)


def gemm(left: Operand, right: np.ndarray) -> np.ndarray:
    """``left @ right`` with ``left`` dense or N:M compressed.

    Products accumulate in ``ACC_DTYPE`` and round once to working precision,
    so the result does not depend on summation order or on which path ran.
    """
    if isinstance(left, SparseOperand):
        return _sparse_matmul(left, right)
    return (left.astype(ACC_DTYPE) @ right.astype(ACC_DTYPE)).astype(WORK_DTYPE)


def sparse_gemm_emulated(compressed_operand, dense_operand) -> np.ndarray:
    """Multiply an N:M compressed matrix ``(nnz, meta)`` by a dense one.

    Equals ``expand_sparse(nnz, meta) @ dense_operand``; only the stored values
    are multiplied.
    """
    nnz, meta = compressed_operand
    nnz = np.asarray(nnz, dtype=WORK_DTYPE)
    dense = np.asarray(dense_operand, dtype=WORK_DTYPE)
    if dense.ndim != 2:
        raise ValueError(f"dense operand must be 2-D, got shape {dense.shape}")
    expected = nnz.shape[1] * meta.pattern.m_group // meta.pattern.n_keep
    if dense.shape[0] != expected:
        raise ValueError(
            f"reduction dims disagree: compressed operand spans {expected}, "
            f"dense operand has {dense.shape[0]} rows"
        )
    return _sparse_matmul(SparseOperand.from_meta(nnz, meta, expected), dense)


@dataclass(frozen=True)
class TileConfig:
    b_r: int = 64
    b_c: int = 64

    def __post_init__(self):
        if self.b_r <= 0 or self.b_c <= 0:
            raise ValueError(f"tile sizes must be positive, got {self.b_r}x{self.b_c}")


@dataclass(frozen=True, eq=False)
class AttentionWorkload:
    """Queries ``(heads, n_q, d)`` against per-KV-head key and value caches.

    Query head ``h`` reads KV head ``h // gqa_group``. Decode workloads may add a
    dense tail per KV head (tokens generated after compression).
    """

    queries: np.ndarray
    keys: Sequence[Cache]
    values: Sequence[Cache]
    causal: bool = False
    phase: str = PREFILL
    scale: float | None = None
    key_tail: Sequence[np.ndarray] | None = None
    value_tail: Sequence[np.ndarray] | None = None

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=WORK_DTYPE)
        if q.ndim == 2:
            q = q[None]
        if q.ndim != 3:
            raise ValueError(f"queries must be (heads, n_q, d), got shape {q.shape}")
        object.__setattr__(self, "queries", q)
        for name in ("keys", "values", "key_tail", "value_tail"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, (CompressedCache, np.ndarray))):
                object.__setattr__(self, name, (v,))
            elif v is not None:
                object.__setattr__(self, name, tuple(v))
        if len(self.keys) != len(self.values) or not self.keys:
            raise ValueError("need one key and one value cache per KV head")
        if q.shape[0] % len(self.keys):
            raise ValueError(f"{q.shape[0]} query heads do not divide over {len(self.keys)} KV heads")
        if self.phase not in (PREFILL, DECODE):
            raise ValueError(f"phase must be {PREFILL!r} or {DECODE!r}")
        for k, v in zip(self.keys, self.values):
            if _cache_len(k) != _cache_len(v):
                raise ValueError("key and value caches differ in length")
            if _cache_dim(k) != self.head_dim or _cache_dim(v) != self.head_dim:
                raise ValueError("cache head dimension does not match queries")
        if self.phase == DECODE and q.shape[1] != 1:
            raise ValueError(f"decode takes one query per head, got {q.shape[1]}")
        if self.causal and self.phase == PREFILL and q.shape[1] != self.seq_len:
            raise ValueError(
                f"causal prefill needs n_q == cached length ({q.shape[1]} != {self.seq_len})"
            )

    @property
    def head_dim(self) -> int:
        return self.queries.shape[2]

    @property
    def seq_len(self) -> int:
        return _cache_len(self.keys[0])

    @property
    def gqa_group(self) -> int:
        return self.queries.shape[0] // len(self.keys)

    @property
    def softmax_scale(self) -> float:
        return self.scale if self.scale is not None else 1.0 / np.sqrt(self.head_dim)


def _cache_len(c: Cache) -> int:
    return c.seq_len if isinstance(c, CompressedCache) else np.asarray(c).shape[0]


def _cache_dim(c: Cache) -> int:
    return c.head_dim if isinstance(c, CompressedCache) else np.asarray(c).shape[1]


class KVBlock(NamedTuple):
    start: int
    length: int
    key: Operand  # K_j,   (length, d)
    value: Operand  # V_j^T, (d, length)


def _operands(c: Cache, axis: str, block_size: int, specialize: bool) -> list[Operand]:
    if not isinstance(c, CompressedCache):
        x = np.asarray(c, dtype=WORK_DTYPE)
        blocks = [x[s:s + block_size] for s in range(0, x.shape[0], block_size)]
        return blocks if axis == KEY else [b.T for b in blocks]
    if c.block_size != block_size:
        raise ValueError(f"tile b_c={block_size} must equal cache block size {c.block_size}")
    B, L = c.block_size, c.seq_len
    rows, cols = c.operand_shape

    def dense(slot, j):
        blk = c.dense_pool[slot, : min(B, L - j * B)]
        return blk if axis == KEY else blk.T

    def sparse(slot):
        return SparseOperand.from_meta(c.nnz_pool[slot], c.block_meta(slot), cols)

    if specialize and c.sparse_count == 0:
        return [dense(j, j) for j in range(c.num_blocks)]
    if specialize and c.dense_count == 0:
        return [sparse(j) for j in range(c.num_blocks)]
    out = []
    for j in range(c.num_blocks):
        is_dense, slot = c.locate(j)
        out.append(dense(slot, j) if is_dense else sparse(slot))
    return out


def kv_blocks(key: Cache, value: Cache, block_size: int, specialize: bool = True,
              key_tail=None, value_tail=None) -> list[KVBlock]:
    """Resolve every logical block to its GEMM operands via the index map.

    With ``specialize`` the all-dense and all-sparse caches skip the per-block
    index lookups; the operands are the same either way.
    """
    if isinstance(key, CompressedCache) and key.axis != KEY:
        raise ValueError("key cache was compressed along the value axis")
    if isinstance(value, CompressedCache) and value.axis != VALUE:
        raise ValueError("value cache was compressed along the key axis")
    ks = _operands(key, KEY, block_size, specialize)
    vs = _operands(value, VALUE, block_size, specialize)
    L = _cache_len(key)
    blocks = [
        KVBlock(j * block_size, min(block_size, L - j * block_size), k, v)
        for j, (k, v) in enumerate(zip(ks, vs))
    ]
    if key_tail is not None:
        kt = np.asarray(key_tail, dtype=WORK_DTYPE)
        vt = np.asarray(value_tail, dtype=WORK_DTYPE)
        for s in range(0, kt.shape[0], block_size):
            blocks.append(KVBlock(L + s, min(block_size, kt.shape[0] - s),
                                  kt[s:s + block_size], vt[s:s + block_size].T))
    return blocks


@dataclass
class SoftmaxState:
    """Running statistics for one query tile, kept transposed like the output."""

    running_max: np.ndarray
    running_sum: np.ndarray
    acc: np.ndarray  # O^T, (d, rows)

    @classmethod
    def empty(cls, rows: int, d: int) -> SoftmaxState:
        return cls(
            np.full(rows, -np.inf, dtype=WORK_DTYPE),
            np.zeros(rows, dtype=WORK_DTYPE),
            np.zeros((d, rows), dtype=WORK_DTYPE),
        )

    @property
    def logsumexp(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.running_max + np.log(self.running_sum)

    def update(self, scores_t: np.ndarray, value_t: Operand) -> np.ndarray:
        """Fold in one key block's scores ``S^T``; returns ``P^T``."""
        new_max = np.maximum(self.running_max, scores_t.max(axis=0))
        # rows that have seen no unmasked key keep a -inf max
        ref = np.where(np.isneginf(new_max), 0, new_max).astype(WORK_DTYPE)
        alpha = np.exp(self.running_max - ref)
        p_t = np.exp(scores_t - ref)
        self.running_sum = self.running_sum * alpha + p_t.sum(axis=0)
        # P^T is already in GEMM2's right-operand layout: the relayout is the identity here
        self.acc = self.acc * alpha + gemm(value_t, p_t)
        self.running_max = new_max
        return p_t

    def output(self) -> np.ndarray:
        """Normalized ``O`` (rows, d)."""
        denom = np.where(self.running_sum > 0, self.running_sum, 1).astype(WORK_DTYPE)
        return (self.acc / denom).T


def block_scores(q_t: np.ndarray, blk: KVBlock, scale: float,
                 q_pos: np.ndarray | None = None) -> np.ndarray:
    s_t = gemm(blk.key, q_t) * WORK_DTYPE(scale)
    if q_pos is not None:
        k_pos = np.arange(blk.start, blk.start + blk.length)
        s_t = np.where(k_pos[:, None] > q_pos[None, :], -np.inf, s_t).astype(WORK_DTYPE)
    return s_t


def attend_blocks(q: np.ndarray, blocks: Sequence[KVBlock], scale: float,
                  q_pos: np.ndarray | None = None) -> SoftmaxState:
    """Stream ``blocks`` through online softmax for one tile of query rows.

    ``q_pos`` enables causal masking; blocks wholly after the last query
    position are skipped.
    """
    q_t = np.ascontiguousarray(q.T)
    state = SoftmaxState.empty(q.shape[0], q.shape[1])
    last = None if q_pos is None else int(q_pos.max())
    for blk in blocks:
        if last is not None and blk.start > last:
            continue
        state.update(block_scores(q_t, blk, scale, q_pos), blk.value)
    return state


def _group_rows(w: AttentionWorkload, h: int) -> np.ndarray:
    g = w.gqa_group
    return w.queries[h * g:(h + 1) * g]  # (g, n_q, d)


def prefill_attention(w: AttentionWorkload, tiles: TileConfig | None = None,
                      specialize: bool = True) -> np.ndarray:
    """Tiled attention for all query heads; returns ``(heads, n_q, d)``.

    The query heads sharing a KV head are stacked into one tile, so each KV
    block is fetched once per tile for the whole group.
    """
    if tiles is None:
        first = w.keys[0]
        tiles = TileConfig(64, first.block_size if isinstance(first, CompressedCache) else 64)
    heads, n_q, d = w.queries.shape
    g = w.gqa_group
    out = np.zeros_like(w.queries)
    scale = w.softmax_scale
    for h, (k, v) in enumerate(zip(w.keys, w.values)):
        blocks = kv_blocks(k, v, tiles.b_c, specialize)
        group = _group_rows(w, h)
        for start in range(0, n_q, tiles.b_r):
            stop = min(start + tiles.b_r, n_q)
            q = group[:, start:stop].reshape(-1, d)
            q_pos = np.tile(np.arange(start, stop), g) if w.causal else None
            o = attend_blocks(q, blocks, scale, q_pos).output()
            out[h * g:(h + 1) * g, start:stop] = o.reshape(g, stop - start, d)
    return out


@dataclass
class SplitPartial:
    """Unnormalized output of one KV range, scaled to its own max."""

    out_t: np.ndarray  # (d, rows)
    m: np.ndarray
    l: np.ndarray

    @classmethod
    def from_state(cls, s: SoftmaxState) -> SplitPartial:
        return cls(s.acc, s.running_max, s.running_sum)


def combine_splits(parts: Sequence[SplitPartial]) -> np.ndarray:
    """Merge split-KV partials into the normalized ``(rows, d)`` output."""
    m = parts[0].m
    for p in parts[1:]:
        m = np.maximum(m, p.m)
    ref = np.where(np.isneginf(m), 0, m).astype(WORK_DTYPE)
    l = None
    acc = None
    for p in parts:
        w = np.exp(p.m - ref)
        l = p.l * w if l is None else l + p.l * w
        acc = p.out_t * w if acc is None else acc + p.out_t * w
    denom = np.where(l > 0, l, 1).astype(WORK_DTYPE)
    return (acc / denom).T


def split_ranges(n_blocks: int, splits: int) -> list[range]:
    """Contiguous, near-equal block ranges; ``splits`` clamps to ``[1, n_blocks]``."""
    splits = max(1, min(splits, n_blocks))
    edges = np.linspace(0, n_blocks, splits + 1).round().astype(int)
    return [range(a, b) for a, b in zip(edges[:-1], edges[1:])]


def decode_attention(w: AttentionWorkload, splits: int = 1, block_size: int | None = None,
                     specialize: bool = True) -> np.ndarray:
    """One decode step with split-KV; returns ``(heads, 1, d)``.

    Each KV head's query group is evaluated as a short stacked query tile.
    """
    if w.queries.shape[1] != 1:
        raise ValueError("decode_attention takes one query per head")
    if block_size is None:
        first = w.keys[0]
        block_size = first.block_size if isinstance(first, CompressedCache) else 64
    heads, _, d = w.queries.shape
    g = w.gqa_group
    out = np.zeros_like(w.queries)
    for h, (k, v) in enumerate(zip(w.keys, w.values)):
        kt = w.key_tail[h] if w.key_tail is not None else None
        vt = w.value_tail[h] if w.value_tail is not None else None
        blocks = kv_blocks(k, v, block_size, specialize, kt, vt)
        q = _group_rows(w, h).reshape(g, d)
        parts = [
            SplitPartial.from_state(attend_blocks(q, [blocks[i] for i in r], w.softmax_scale))
            for r in split_ranges(len(blocks), splits)
        ]
        out[h * g:(h + 1) * g, 0] = combine_splits(parts)
    return out


def dense_attention_oracle(q, k, v, causal: bool = False, scale: float | None = None) -> np.ndarray:
    """Materialized ``softmax(Q K^T * scale) V`` for one head.

    Computed in ``ACC_DTYPE`` from working-precision inputs, then rounded.
    """
    q = np.asarray(q, dtype=WORK_DTYPE).astype(ACC_DTYPE)
    k = np.asarray(k, dtype=WORK_DTYPE).astype(ACC_DTYPE)
    v = np.asarray(v, dtype=WORK_DTYPE).astype(ACC_DTYPE)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    s = (q @ k.T) * scale
    if causal:
        n_q, n_k = s.shape
        # queries are aligned to the end of the key sequence
        visible = np.arange(n_k)[None, :] <= np.arange(n_k - n_q, n_k)[:, None]
        s = np.where(visible, s, -np.inf)
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return (p @ v).astype(WORK_DTYPE)


def workload_oracle(w: AttentionWorkload) -> np.ndarray:
    """Dense oracle over every head, decompressing any compressed caches."""
    from .compressor import decompress

    out = np.zeros_like(w.queries)
    g = w.gqa_group
    for h in range(w.queries.shape[0]):
        kh = w.keys[h // g]
        vh = w.values[h // g]
        k = decompress(kh) if isinstance(kh, CompressedCache) else np.asarray(kh)
        v = decompress(vh) if isinstance(vh, CompressedCache) else np.asarray(vh)
        if w.key_tail is not None:
            k = np.concatenate([k, w.key_tail[h // g]])
            v = np.concatenate([v, w.value_tail[h // g]])
        out[h] = dense_attention_oracle(w.queries[h], k, v, w.causal, w.softmax_scale)
    return out


class OpCounts(NamedTuple):
    flops: int
    bytes_moved: int


def flop_and_byte_count(w: AttentionWorkload, tiles: TileConfig | None = None,
                        all_dense: bool = False) -> OpCounts:
    """Analytical GEMM work and cache traffic.

    Each GEMM costs ``2 * rows * block_len * d`` flops on a dense block and half
    that on an N:M sparse block; ``all_dense`` counts every block as dense.
    Causal workloads count only the query-tile/key-block pairs the engine
    visits, which needs ``tiles``; without it the full rectangle is counted.
    Bytes are the caches' storage sizes, read once per decode step.
    """
    d = w.head_dim
    n_q = w.queries.shape[1]
    g = w.gqa_group
    flops = nbytes = 0
    for k, v in zip(w.keys, w.values):
        for c in (k, v):
            if isinstance(c, CompressedCache):
                nbytes += measure_size(c).total
            else:
                nbytes += int(np.prod(np.shape(c))) * 2
        if tiles is not None:
            b_c = tiles.b_c
        else:
            b_c = k.block_size if isinstance(k, CompressedCache) else 64
        if tiles is not None and w.causal:
            row_tiles = [(s, min(s + tiles.b_r, n_q)) for s in range(0, n_q, tiles.b_r)]
        else:
            row_tiles = [(0, n_q)]
        for blk in kv_blocks(k, v, b_c):
            for a, b in row_tiles:
                if tiles is not None and w.causal and blk.start > b - 1:
                    continue
                unit = 2 * g * (b - a) * blk.length * d
                for op in (blk.key, blk.value):
                    sparse = isinstance(op, SparseOperand) and not all_dense
                    flops += unit // 2 if sparse else unit
    return OpCounts(flops, nbytes)
