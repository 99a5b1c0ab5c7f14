"""Hierarchical magnitude pruning of a KV cache.

Two levels of masks are produced per cache:

* an element mask keeping the top-N magnitudes of every M-element group, with
  groups running along the GEMM reduction axis (channels for keys, in-block
  token positions for values);
* a block mask choosing which sequence blocks stay dense. The lowest-loss
  fraction of unprotected blocks is pruned to N:M sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import NmPattern, SparsityConfig, TWO_FOUR, as_tensor2d, topn_positions

KEY = "key"
VALUE = "value"
AXES = (KEY, VALUE)


@dataclass(frozen=True, eq=False)
class BlockMask:
    """``flags[i]`` is True when block ``i`` stays dense."""

    flags: np.ndarray
    losses: np.ndarray

    @property
    def sparse_blocks(self) -> list[int]:
        return np.flatnonzero(~self.flags).tolist()

    @property
    def num_blocks(self) -> int:
        return self.flags.size


@dataclass(frozen=True, eq=False)
class HierarchicalMask:
    element: np.ndarray
    block: BlockMask
    axis: str
    block_size: int
    protected_prefix_blocks: int = 0
    protected_suffix_blocks: int = 0

    @property
    def protected(self) -> np.ndarray:
        return protected_flags(
            self.block.num_blocks, self.protected_prefix_blocks, self.protected_suffix_blocks
        )


def _grouped_view(block: np.ndarray, axis: str) -> np.ndarray:
    # keys reduce over channels, values over tokens: put the grouping axis last
    if axis == KEY:
        return block
    if axis == VALUE:
        return block.T
    raise ValueError(f"axis must be one of {AXES}, got {axis!r}")


def element_mask(block: np.ndarray, axis: str = KEY, pattern: NmPattern = TWO_FOUR) -> np.ndarray:
    """Keep the ``n_keep`` largest magnitudes in every group; ties keep the lower index.

    ``block`` is ``(tokens, channels)``. The returned boolean mask has the same shape.
    """
    view = _grouped_view(np.asarray(block), axis)
    rows, cols = view.shape
    keep = topn_positions(view, pattern)
    mask = np.zeros((rows, cols // pattern.m_group, pattern.m_group), dtype=bool)
    np.put_along_axis(mask, keep, True, axis=-1)
    mask = mask.reshape(rows, cols)
    return mask if axis == KEY else mask.T


def block_loss(block: np.ndarray, mask: np.ndarray) -> float:
    """L1 norm of the elements the mask prunes away."""
    block = np.asarray(block)
    mask = np.asarray(mask, dtype=bool)
    if block.shape != mask.shape:
        raise ValueError(f"shape mismatch: block {block.shape} vs mask {mask.shape}")
    return float(np.abs(block[~mask].astype(np.float64)).sum())


def protected_flags(num_blocks: int, prefix: int, suffix: int) -> np.ndarray:
    prot = np.zeros(num_blocks, dtype=bool)
    prot[: min(prefix, num_blocks)] = True
    if suffix > 0:
        prot[max(num_blocks - suffix, 0):] = True
    return prot


def sparse_quota(target_sparsity: float, prunable: int) -> int:
    # tolerance guards products like 0.29 * 100 = 28.999999999999996
    return min(prunable, math.floor(target_sparsity * prunable + 1e-9))


def select_blocks(losses, target_sparsity: float, prefix: int = 0, suffix: int = 0) -> BlockMask:
    """Flag the lowest-loss ``floor(S * prunable)`` unprotected blocks as sparse.

    Loss ties prune the lower block index first. Protected blocks are always dense.
    """
    if not 0.0 <= target_sparsity <= 1.0:
        raise ValueError(f"target sparsity must lie in [0, 1], got {target_sparsity}")
    losses = np.asarray(losses, dtype=np.float64)
    n = losses.size
    if prefix > n or suffix > n:
        raise ValueError(f"protected counts ({prefix}, {suffix}) exceed {n} blocks")
    candidates = np.flatnonzero(~protected_flags(n, prefix, suffix))
    quota = sparse_quota(target_sparsity, candidates.size)
    order = candidates[np.argsort(losses[candidates], kind="stable")]
    flags = np.ones(n, dtype=bool)
    flags[order[:quota]] = False
    return BlockMask(flags, losses)


def _protected_counts(seq_len: int, cfg: SparsityConfig) -> tuple[int, int, int]:
    num_blocks = -(-seq_len // cfg.block_size)
    prefix = min(cfg.sink_blocks, num_blocks)
    suffix = 0
    if cfg.local_window:
        first = max(seq_len - cfg.local_window, 0) // cfg.block_size
        suffix = num_blocks - first
    if seq_len % cfg.block_size:
        # a partial tail block is always dense
        suffix = max(suffix, 1)
    return num_blocks, prefix, suffix


def _candidate_masks(x: np.ndarray, cfg: SparsityConfig, axis: str, prot: np.ndarray):
    """N:M element mask and loss for every unprotected block."""
    B = cfg.block_size
    candidate = np.ones_like(x, dtype=bool)
    losses = np.zeros(prot.size)
    for j in np.flatnonzero(~prot):
        blk = x[j * B:(j + 1) * B]
        m = element_mask(blk, axis, cfg.pattern)
        candidate[j * B:(j + 1) * B] = m
        losses[j] = block_loss(blk, m)
    return candidate, losses


def _apply_blocks(candidate: np.ndarray, flags: np.ndarray, B: int) -> np.ndarray:
    element = candidate.copy()
    for j in np.flatnonzero(flags):
        element[j * B:(j + 1) * B] = True
    return element


def _validated(cache, cfg: SparsityConfig, axis: str) -> np.ndarray:
    x = as_tensor2d(cache, f"{axis} cache")
    if axis == KEY and x.shape[1] % cfg.pattern.m_group:
        raise ValueError(f"head dim {x.shape[1]} not divisible by {cfg.pattern.m_group}")
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    return x


def prune_one(cache, cfg: SparsityConfig, axis: str, sparsity: float | None = None) -> HierarchicalMask:
    """Element mask, per-block losses and block selection for one cache."""
    x = _validated(cache, cfg, axis)
    if sparsity is None:
        sparsity = cfg.s_key if axis == KEY else cfg.s_value
    num_blocks, prefix, suffix = _protected_counts(x.shape[0], cfg)
    prot = protected_flags(num_blocks, prefix, suffix)
    candidate, losses = _candidate_masks(x, cfg, axis, prot)
    block = select_blocks(losses, sparsity, prefix, suffix)
    element = _apply_blocks(candidate, block.flags, cfg.block_size)
    return HierarchicalMask(element, block, axis, cfg.block_size, prefix, suffix)


def prune_cache(key, value, cfg: SparsityConfig) -> tuple[HierarchicalMask, HierarchicalMask]:
    """Prune keys at ``cfg.s_key`` and values at ``cfg.s_value`` independently."""
    return prune_one(key, cfg, KEY), prune_one(value, cfg, VALUE)


def further_prune(cache, mask: HierarchicalMask, cfg: SparsityConfig, sparsity: float) -> HierarchicalMask:
    """Raise a cache's block sparsity without restoring any already-sparse block.

    Used between prefill and decode: blocks sparse after prefill stay sparse and
    the lowest-loss remaining prunable blocks are added until the new quota is met.
    """
    x = _validated(cache, cfg, mask.axis)
    prot = mask.protected
    candidate, losses = _candidate_masks(x, cfg, mask.axis, prot)
    flags = mask.block.flags.copy()
    need = sparse_quota(sparsity, int((~prot).sum())) - int((~flags).sum())
    if need > 0:
        remaining = np.flatnonzero(flags & ~prot)
        order = remaining[np.argsort(losses[remaining], kind="stable")]
        flags[order[:need]] = False
    element = _apply_blocks(candidate, flags, mask.block_size)
    return HierarchicalMask(
        element, BlockMask(flags, losses), mask.axis, mask.block_size,
        mask.protected_prefix_blocks, mask.protected_suffix_blocks,
    )
