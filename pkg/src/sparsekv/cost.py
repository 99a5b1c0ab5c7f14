"""Closed-form memory and speed model for block-sparse N:M KV caches.

All sizes are in 16-bit element units. With key/value block sparsities ``S_K``
and ``S_V`` a sparse block keeps half its values plus metadata worth 1/16 of
the dense block, and the index maps cost one entry per block per cache.
Prefill is modeled as compute-bound (sparse GEMMs at twice dense throughput),
decode as memory-bound (speedup equals the compression ratio).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class CostParams:
    seq_len: int = 4096
    head_dim: int = 128
    block_size: int = 64
    s_key: float = 0.0
    s_value: float = 0.0
    throughput: float = 1.0
    metadata_fraction: float = 1 / 16
    nnz_fraction: float = 1 / 2

    def __post_init__(self):
        for name in ("s_key", "s_value"):
            s = getattr(self, name)
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {s}")
        if min(self.seq_len, self.head_dim, self.block_size) <= 0:
            raise ValueError("seq_len, head_dim and block_size must be positive")
        if self.throughput <= 0:
            raise ValueError("throughput must be positive")

    @property
    def saving_per_sparse_block(self) -> float:
        """Fraction of the combined K+V size saved per unit of sparsity (0.21875 for 2:4)."""
        return (1.0 - self.nnz_fraction - self.metadata_fraction) / 2.0


def size_components(p: CostParams) -> dict:
    """Element counts of baseline, index maps, dense pools, non-zeros and metadata."""
    L, D, B = p.seq_len, p.head_dim, p.block_size
    s = p.s_key + p.s_value
    return {
        "baseline": 2 * L * D,
        "idx": 2 * L / B,
        "den": L * D * (1 - p.s_key) + L * D * (1 - p.s_value),
        "nnz": p.nnz_fraction * L * D * s,
        "e": p.metadata_fraction * L * D * s,
    }


def compression_ratio(p: CostParams, exact: bool = False) -> float:
    denom = 1.0 - p.saving_per_sparse_block * (p.s_key + p.s_value)
    if exact:
        denom += 1.0 / (p.block_size * p.head_dim)
    return 1.0 / denom


def prefill_times(p: CostParams) -> tuple[float, float, float]:
    """(baseline, dense part, sparse part) GEMM times at throughput C and 2C."""
    L, D, C = p.seq_len, p.head_dim, p.throughput
    gemm = 2 * L * L * D
    baseline = 2 * gemm / C
    dense = gemm * (1 - p.s_key) / C + gemm * (1 - p.s_value) / C
    sparse = gemm * p.s_key / (2 * C) + gemm * p.s_value / (2 * C)
    return baseline, dense, sparse


def prefill_speedup(p: CostParams) -> float:
    return 4.0 / (4.0 - (p.s_key + p.s_value))


def prefill_speedup_from_times(p: CostParams) -> float:
    baseline, dense, sparse = prefill_times(p)
    return baseline / (dense + sparse)


def decode_speedup(p: CostParams) -> float:
    return compression_ratio(p, exact=False)


@dataclass(frozen=True)
class DesignRow:
    config: str
    gemm1: str
    gemm2: str
    sparse_operands: tuple[str, str]
    algo_support: str
    prefill: float
    decode: float


# Ideal speedups of each GEMM orientation with both sparse operands fully 2:4.
DESIGN_SPACE = (
    DesignRow("Naive", "S = Q x K^T", "O = P x V", ("Q", "P"), "Online-Only", 2.0, 1.0),
    DesignRow("Trans-K", "S^T = K x Q^T", "O = (P^T)^T x V", ("K", "P"), "Mixed", 2.0, 1.5),
    DesignRow("Trans-V", "S = Q x K^T", "O^T = V^T x (P)^T", ("Q", "V"), "Mixed", 2.0, 1.5),
    DesignRow("Trans-Both", "S^T = K x Q^T", "O^T = V^T x P^T", ("K", "V"), "Online/Offline", 2.0, 2.0),
)


def design_space_table(p: CostParams | None = None) -> list[DesignRow]:
    """The four GEMM orientations and their ideal speedups.

    The figures assume ``S_K = S_V = 1``; the only orientation whose sparse
    operands are both offline caches is the one the engine implements.
    """
    if p is not None and (p.s_key, p.s_value) != (1.0, 1.0):
        raise ValueError("the design-space comparison is defined at S_K = S_V = 1")
    return list(DESIGN_SPACE)


def cost_report(p: CostParams) -> dict:
    sizes = size_components(p)
    return {
        "params": asdict(p),
        "sizes": sizes,
        "r_comp_exact": compression_ratio(p, exact=True),
        "r_comp_approx": compression_ratio(p),
        "speedup_prefill": prefill_speedup(p),
        "speedup_decode": decode_speedup(p),
    }


def sweep(step: float = 0.25, base: CostParams | None = None) -> list[dict]:
    """Cost reports over an ``(S_K, S_V)`` grid, both axes from 0 to 1."""
    if not 0 < step <= 1:
        raise ValueError(f"step must lie in (0, 1], got {step}")
    base = base or CostParams()
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise ValueError(f"step {step} does not divide [0, 1] evenly")
    grid = [i / n for i in range(n + 1)]
    rows = []
    for sk in grid:
        for sv in grid:
            p = CostParams(base.seq_len, base.head_dim, base.block_size, sk, sv,
                           base.throughput, base.metadata_fraction, base.nnz_fraction)
            rows.append({
                "s_key": sk,
                "s_value": sv,
                "r_comp_exact": compression_ratio(p, exact=True),
                "r_comp_approx": compression_ratio(p),
                "speedup_prefill": prefill_speedup(p),
                "speedup_decode": decode_speedup(p),
            })
    return rows
