"""Pooled storage for a block-sparse KV cache.

Blocks flagged dense are copied into a dense pool; sparse blocks are reduced to
their kept values (the non-zero pool) plus packed position codes (the metadata
pool). A signed 16-bit index map records, per logical block, which pool holds
it and where: ``e > 0`` is dense-pool slot ``e - 1``, ``e < 0`` is sparse-pool
slot ``-e - 1``.

Sparse operands are stored in the orientation the attention engine multiplies
them in. Key blocks are ``(B, d)`` grouped along channels; value blocks are
stored transposed, ``(d, B)``, grouped along tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    WORK_DTYPE,
    GroupMetadata,
    SparsityConfig,
    check_finite,
    compress_rows,
    expand_sparse,
    require_codec_pattern,
    topn_positions,
    words_for_groups,
)
from .pruner import AXES, KEY, BlockMask, HierarchicalMask

INDEX_DTYPE = np.int16
MAX_POOL_BLOCKS = int(np.iinfo(INDEX_DTYPE).max)
STORAGE_BYTES = 2  # 16-bit element accounting
INDEX_BYTES = np.dtype(INDEX_DTYPE).itemsize
META_BYTES = 2


class CapacityError(OverflowError):
    """A pool outgrew the 16-bit signed index map."""


class CorruptCacheError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompressedCache:
    dense_pool: np.ndarray
    nnz_pool: np.ndarray
    meta_pool: np.ndarray
    index_map: np.ndarray
    seq_len: int
    head_dim: int
    axis: str
    cfg: SparsityConfig = field(default_factory=SparsityConfig)

    @property
    def block_size(self) -> int:
        return self.cfg.block_size

    @property
    def num_blocks(self) -> int:
        return self.index_map.size

    @property
    def dense_count(self) -> int:
        return int((self.index_map > 0).sum())

    @property
    def sparse_count(self) -> int:
        return int((self.index_map < 0).sum())

    @property
    def operand_shape(self) -> tuple[int, int]:
        """Shape of one block as the left GEMM operand (grouping axis last)."""
        B, d = self.block_size, self.head_dim
        return (B, d) if self.axis == KEY else (d, B)

    def block_meta(self, slot: int) -> GroupMetadata:
        rows, cols = self.operand_shape
        groups = rows * cols // self.cfg.pattern.m_group
        return GroupMetadata(self.meta_pool[slot], groups, self.cfg.pattern)

    def locate(self, block: int) -> tuple[bool, int]:
        """``(is_dense, pool slot)`` for a logical block."""
        e = int(self.index_map[block])
        if e > 0 and e <= self.dense_pool.shape[0]:
            return True, e - 1
        if e < 0 and -e <= self.nnz_pool.shape[0]:
            return False, -e - 1
        if e == 0:
            raise CorruptCacheError(f"index map entry {block} is zero")
        raise CorruptCacheError(f"index map entry {block} = {e} points past its pool")


def _empty_pools(cfg: SparsityConfig, d: int, axis: str, dense: int, sparse: int):
    B, p = cfg.block_size, cfg.pattern
    rows, cols = (B, d) if axis == KEY else (d, B)
    kept = cols * p.n_keep // p.m_group
    words = words_for_groups(rows * cols // p.m_group, p)
    return (
        np.zeros((dense, B, d), dtype=WORK_DTYPE),
        np.zeros((sparse, rows, kept), dtype=WORK_DTYPE),
        np.zeros((sparse, words), dtype=np.uint16),
    )


def _assign_offsets(flags: np.ndarray) -> np.ndarray:
    # prefix counts keep slot assignment in sequence order
    dense_slot = np.cumsum(flags)
    sparse_slot = np.cumsum(~flags)
    index_map = np.where(flags, dense_slot, -sparse_slot)
    if dense_slot.size and max(dense_slot[-1], sparse_slot[-1]) > MAX_POOL_BLOCKS:
        raise CapacityError(
            f"pool needs {max(dense_slot[-1], sparse_slot[-1])} blocks; a 16-bit index "
            f"map addresses at most {MAX_POOL_BLOCKS} per pool"
        )
    return index_map.astype(INDEX_DTYPE)


def _check_layout(seq_len: int, d: int, cfg: SparsityConfig, axis: str, num_blocks: int):
    require_codec_pattern(cfg.pattern)
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if axis == KEY and d % cfg.pattern.m_group:
        raise ValueError(f"head dim {d} not divisible by {cfg.pattern.m_group}")
    expected = -(-seq_len // cfg.block_size)
    if num_blocks != expected:
        raise ValueError(
            f"block mask has {num_blocks} blocks, sequence of {seq_len} needs {expected}"
        )


def _operand(block: np.ndarray, axis: str) -> np.ndarray:
    return block if axis == KEY else block.T


def compress(cache, mask: HierarchicalMask, cfg: SparsityConfig) -> CompressedCache:
    """Split a cache into dense and N:M pools following a hierarchical mask."""
    x = check_finite(np.asarray(cache, dtype=WORK_DTYPE), "cache")
    seq_len, d = x.shape
    if mask.element.shape != x.shape:
        raise ValueError(f"element mask {mask.element.shape} does not match cache {x.shape}")
    if mask.block_size != cfg.block_size:
        raise ValueError(f"mask block size {mask.block_size} != config {cfg.block_size}")
    flags = np.asarray(mask.block.flags, dtype=bool)
    _check_layout(seq_len, d, cfg, mask.axis, flags.size)
    if seq_len % cfg.block_size and not flags[-1]:
        raise ValueError("a partial trailing block cannot be sparse")

    index_map = _assign_offsets(flags)
    dense_pool, nnz_pool, meta_pool = _empty_pools(
        cfg, d, mask.axis, int(flags.sum()), int((~flags).sum())
    )
    B, p = cfg.block_size, cfg.pattern
    for j, e in enumerate(index_map.tolist()):
        rows = slice(j * B, (j + 1) * B)
        blk = x[rows]
        if e > 0:
            dense_pool[e - 1, : blk.shape[0]] = blk
            continue
        keep = _operand(mask.element[rows], mask.axis)
        op = _operand(blk, mask.axis)
        grouped = keep.reshape(op.shape[0], -1, p.m_group)
        if np.any(grouped.sum(axis=-1) != p.n_keep):
            raise ValueError(f"element mask of sparse block {j} is not {p} in every group")
        positions = np.nonzero(grouped)[-1].reshape(op.shape[0], -1, p.n_keep)
        nnz, meta = compress_rows(op, positions, p)
        nnz_pool[-e - 1] = nnz
        meta_pool[-e - 1] = meta.words
    return CompressedCache(dense_pool, nnz_pool, meta_pool, index_map, seq_len, d, mask.axis, cfg)


def fused_magnitude_compress(cache, block_mask: BlockMask, cfg: SparsityConfig, axis: str = KEY) -> CompressedCache:
    """Single-pass compression selecting top-N magnitudes directly.

    Equivalent to building the element mask and calling :func:`compress`, but
    each block of ``cache`` is read exactly once. ``cache`` only needs
    ``shape`` and row slicing.
    """
    seq_len, d = cache.shape
    flags = np.asarray(block_mask.flags, dtype=bool)
    _check_layout(seq_len, d, cfg, axis, flags.size)
    if seq_len % cfg.block_size and not flags[-1]:
        raise ValueError("a partial trailing block cannot be sparse")

    index_map = _assign_offsets(flags)
    dense_pool, nnz_pool, meta_pool = _empty_pools(
        cfg, d, axis, int(flags.sum()), int((~flags).sum())
    )
    B = cfg.block_size
    for j, e in enumerate(index_map.tolist()):
        blk = check_finite(np.asarray(cache[j * B:(j + 1) * B], dtype=WORK_DTYPE), "cache")
        if e > 0:
            dense_pool[e - 1, : blk.shape[0]] = blk
            continue
        op = _operand(blk, axis)
        nnz, meta = compress_rows(op, topn_positions(op, cfg.pattern), cfg.pattern)
        nnz_pool[-e - 1] = nnz
        meta_pool[-e - 1] = meta.words
    return CompressedCache(dense_pool, nnz_pool, meta_pool, index_map, seq_len, d, axis, cfg)


def decompress_block(c: CompressedCache, block: int) -> np.ndarray:
    """Dense ``(tokens, d)`` view of one logical block, trimmed at the sequence end."""
    B = c.block_size
    length = min(B, c.seq_len - block * B)
    dense, slot = c.locate(block)
    if dense:
        return c.dense_pool[slot, :length]
    rows, cols = c.operand_shape
    op = expand_sparse(c.nnz_pool[slot], c.block_meta(slot), c.cfg.pattern, cols)
    return _operand(op, c.axis)[:length]


def decompress(c: CompressedCache) -> np.ndarray:
    """Rebuild the masked cache ``x * m`` from the pools."""
    out = np.zeros((c.seq_len, c.head_dim), dtype=WORK_DTYPE)
    seen_dense, seen_sparse = set(), set()
    B = c.block_size
    for j in range(c.num_blocks):
        dense, slot = c.locate(j)
        seen = seen_dense if dense else seen_sparse
        if slot in seen:
            raise CorruptCacheError(f"pool slot {slot} referenced twice (block {j})")
        seen.add(slot)
        out[j * B:(j + 1) * B] = decompress_block(c, j)
    return out


@dataclass(frozen=True)
class SizeBreakdown:
    """Bytes per storage component at 16-bit element accounting."""

    idx: int = 0
    den: int = 0
    nnz: int = 0
    e: int = 0
    baseline: int = 0

    @property
    def total(self) -> int:
        return self.idx + self.den + self.nnz + self.e

    @property
    def ratio(self) -> float:
        return self.baseline / self.total if self.total else 1.0

    def __add__(self, other: SizeBreakdown) -> SizeBreakdown:
        return SizeBreakdown(
            self.idx + other.idx,
            self.den + other.den,
            self.nnz + other.nnz,
            self.e + other.e,
            self.baseline + other.baseline,
        )

    def as_dict(self) -> dict:
        return {
            "size_idx": self.idx,
            "size_den": self.den,
            "size_nnz": self.nnz,
            "size_e": self.e,
            "total": self.total,
            "baseline": self.baseline,
        }


def measure_size(c: CompressedCache) -> SizeBreakdown:
    """Byte sizes of one cache's index map and pools.

    Key and value caches carry separate index maps; sum two breakdowns to get
    the per-layer figure.
    """
    return SizeBreakdown(
        idx=c.index_map.size * INDEX_BYTES,
        den=c.dense_pool.size * STORAGE_BYTES,
        nnz=c.nnz_pool.size * STORAGE_BYTES,
        e=c.meta_pool.size * META_BYTES,
        baseline=c.seq_len * c.head_dim * STORAGE_BYTES,
    )
