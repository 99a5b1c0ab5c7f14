"""N:M sparsity primitives shared by the pruner, compressor and attention engine.

Tensors are plain ``numpy`` arrays in 32-bit working precision. Sparse operands
are represented by their kept values (``nnz``) plus packed 2-bit position codes
(:class:`GroupMetadata`), grouped along the last axis of the operand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORK_DTYPE = np.float32
# GEMM accumulator, wider than the operands as on tensor cores
ACC_DTYPE = np.float64
CODE_BITS = 2
CODES_PER_WORD = 16 // CODE_BITS


@dataclass(frozen=True)
class NmPattern:
    """Keep ``n_keep`` out of every ``m_group`` consecutive elements."""

    n_keep: int = 2
    m_group: int = 4

    def __post_init__(self):
        if not 0 < self.n_keep < self.m_group:
            raise ValueError(
                f"invalid N:M pattern {self.n_keep}:{self.m_group}; need 0 < N < M"
            )

    @property
    def keep_fraction(self) -> float:
        return self.n_keep / self.m_group

    def __str__(self) -> str:
        return f"{self.n_keep}:{self.m_group}"


TWO_FOUR = NmPattern(2, 4)


def require_codec_pattern(pattern: NmPattern) -> None:
    if pattern != TWO_FOUR:
        raise ValueError(f"metadata codec supports 2:4 only, got {pattern}")


@dataclass(frozen=True)
class SparsityConfig:
    """Block sparsity targets plus dense-protected regions, in tokens."""

    s_key: float = 0.0
    s_value: float = 0.0
    block_size: int = 64
    pattern: NmPattern = field(default_factory=NmPattern)
    sink_tokens: int = 0
    local_window: int = 0

    def __post_init__(self):
        for name in ("s_key", "s_value"):
            s = getattr(self, name)
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {s}")
        if self.block_size <= 0 or self.block_size % self.pattern.m_group:
            raise ValueError(
                f"block_size {self.block_size} must be a positive multiple of "
                f"{self.pattern.m_group}"
            )
        if self.sink_tokens < 0 or self.local_window < 0:
            raise ValueError("sink_tokens and local_window must be non-negative")

    @property
    def sink_blocks(self) -> int:
        return -(-self.sink_tokens // self.block_size)

    @property
    def window_blocks(self) -> int:
        return -(-self.local_window // self.block_size)


@dataclass(frozen=True, eq=False)
class GroupMetadata:
    """Packed 2-bit kept-position codes, eight codes per 16-bit word.

    Group ``g`` occupies bits ``[4g mod 16, 4g mod 16 + 4)`` of word ``g // 4``;
    its first (lowest) kept index sits in the low two bits.
    """

    words: np.ndarray
    group_count: int
    pattern: NmPattern = TWO_FOUR

    @property
    def codes(self) -> np.ndarray:
        """Logical ``(group_count, n_keep)`` view of the codes."""
        return _unpack_codes(self.words, self.group_count * self.pattern.n_keep).reshape(
            self.group_count, self.pattern.n_keep
        )

    def __eq__(self, other):
        if not isinstance(other, GroupMetadata):
            return NotImplemented
        return (
            self.group_count == other.group_count
            and self.pattern == other.pattern
            and np.array_equal(self.words, other.words)
        )

    __hash__ = None


def words_for_groups(group_count: int, pattern: NmPattern = TWO_FOUR) -> int:
    return -(-group_count * pattern.n_keep // CODES_PER_WORD)


def _unpack_codes(words: np.ndarray, code_count: int) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint16)
    shifts = np.arange(CODES_PER_WORD, dtype=np.uint16) * CODE_BITS
    codes = (words[:, None] >> shifts) & np.uint16(0b11)
    return codes.reshape(-1)[:code_count].astype(np.int64)


def _pack_codes(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint16).reshape(-1)
    n_words = -(-codes.size // CODES_PER_WORD)
    padded = np.zeros(n_words * CODES_PER_WORD, dtype=np.uint16)
    padded[: codes.size] = codes
    shifts = np.arange(CODES_PER_WORD, dtype=np.uint16) * CODE_BITS
    packed = (padded.reshape(n_words, CODES_PER_WORD) << shifts).sum(
        axis=1, dtype=np.uint32
    )
    return packed.astype(np.uint16)


def _check_positions(positions: np.ndarray, pattern: NmPattern) -> None:
    if positions.size == 0:
        return
    if positions.min() < 0 or positions.max() >= pattern.m_group:
        raise ValueError(f"kept index out of range [0, {pattern.m_group})")
    if np.any(np.diff(positions, axis=1) <= 0):
        raise ValueError("kept indices within a group must strictly increase")


def pack_metadata(kept_positions, pattern: NmPattern = TWO_FOUR) -> GroupMetadata:
    """Pack per-group kept indices into 16-bit metadata words.

    Args:
        kept_positions: sequence of groups, each listing ``n_keep`` strictly
            increasing indices in ``[0, m_group)``.
        pattern: the N:M pattern; only 2:4 is supported.

    Raises:
        ValueError: on wrong cardinality, out-of-range or unordered indices,
            or a pattern other than 2:4.
    """
    require_codec_pattern(pattern)
    groups = [list(g) for g in kept_positions]
    for g in groups:
        if len(g) != pattern.n_keep:
            raise ValueError(
                f"each group must list exactly {pattern.n_keep} kept indices, got {g}"
            )
    positions = np.asarray(groups, dtype=np.int64).reshape(len(groups), pattern.n_keep)
    _check_positions(positions, pattern)
    return GroupMetadata(_pack_codes(positions), len(groups), pattern)


def unpack_metadata(meta: GroupMetadata, group_count: int | None = None) -> list[list[int]]:
    """Inverse of :func:`pack_metadata`."""
    if group_count is None:
        group_count = meta.group_count
    capacity = meta.words.size * CODES_PER_WORD // meta.pattern.n_keep
    if group_count > capacity:
        raise ValueError(f"metadata holds {capacity} groups, {group_count} requested")
    codes = _unpack_codes(meta.words, group_count * meta.pattern.n_keep)
    codes = codes.reshape(group_count, meta.pattern.n_keep)
    if group_count and np.any(np.diff(codes, axis=1) <= 0):
        bad = int(np.nonzero(np.any(np.diff(codes, axis=1) <= 0, axis=1))[0][0])
        raise ValueError(f"corrupt metadata: non-increasing codes in group {bad}")
    return codes.tolist()


def positions_from_meta(meta: GroupMetadata, rows: int, full_cols: int) -> np.ndarray:
    """Absolute column index of every stored value, shape ``(rows, kept_cols)``."""
    pattern = meta.pattern
    groups_per_row = full_cols // pattern.m_group
    if meta.group_count != rows * groups_per_row:
        raise ValueError(
            f"metadata covers {meta.group_count} groups, operand needs "
            f"{rows * groups_per_row}"
        )
    codes = meta.codes.reshape(rows, groups_per_row, pattern.n_keep)
    if codes.size and np.any(np.diff(codes, axis=-1) <= 0):
        raise ValueError("corrupt metadata: non-increasing codes")
    base = (np.arange(groups_per_row) * pattern.m_group)[None, :, None]
    return (base + codes).reshape(rows, groups_per_row * pattern.n_keep)


def expand_sparse(
    nnz: np.ndarray, meta: GroupMetadata, pattern: NmPattern = TWO_FOUR, full_cols: int | None = None
) -> np.ndarray:
    """Scatter kept values back to their coded columns; zeros elsewhere."""
    require_codec_pattern(pattern)
    nnz = np.asarray(nnz)
    if nnz.ndim != 2:
        raise ValueError(f"nnz must be 2-D, got shape {nnz.shape}")
    rows, kept_cols = nnz.shape
    if full_cols is None:
        full_cols = kept_cols * pattern.m_group // pattern.n_keep
    if full_cols % pattern.m_group or kept_cols * pattern.m_group != full_cols * pattern.n_keep:
        raise ValueError(
            f"nnz has {kept_cols} columns, inconsistent with full_cols={full_cols} "
            f"under {pattern}"
        )
    pos = positions_from_meta(meta, rows, full_cols)
    out = np.zeros((rows, full_cols), dtype=nnz.dtype)
    np.put_along_axis(out, pos, nnz, axis=1)
    return out


def topn_positions(x: np.ndarray, pattern: NmPattern = TWO_FOUR) -> np.ndarray:
    """Indices of the ``n_keep`` largest magnitudes in each group of the last axis.

    Returns shape ``(..., groups, n_keep)`` with indices ascending; magnitude
    ties keep the lower index.
    """
    x = np.asarray(x)
    if x.shape[-1] % pattern.m_group:
        raise ValueError(
            f"grouping axis length {x.shape[-1]} not divisible by {pattern.m_group}"
        )
    grouped = np.abs(x).reshape(*x.shape[:-1], -1, pattern.m_group)
    order = np.argsort(-grouped, axis=-1, kind="stable")
    return np.sort(order[..., : pattern.n_keep], axis=-1)


def compress_rows(
    x: np.ndarray, positions: np.ndarray, pattern: NmPattern = TWO_FOUR
) -> tuple[np.ndarray, GroupMetadata]:
    """Gather kept values group-major and pack their in-group positions."""
    require_codec_pattern(pattern)
    rows, cols = x.shape
    groups = cols // pattern.m_group
    positions = positions.reshape(rows, groups, pattern.n_keep)
    base = (np.arange(groups) * pattern.m_group)[None, :, None]
    nnz = np.take_along_axis(x, (base + positions).reshape(rows, -1), axis=1)
    meta = GroupMetadata(_pack_codes(positions), rows * groups, pattern)
    return nnz, meta


def check_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def as_tensor2d(x, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(x, dtype=WORK_DTYPE)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return check_finite(arr, name)
