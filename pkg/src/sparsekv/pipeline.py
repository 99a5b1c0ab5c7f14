"""Seeded prune -> compress -> attend runs checked against the dense oracle."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import cost
from .attention import (
    DECODE,
    AttentionWorkload,
    TileConfig,
    decode_attention,
    flop_and_byte_count,
    prefill_attention,
    workload_oracle,
)
from .compressor import SizeBreakdown, fused_magnitude_compress, measure_size
from .core import WORK_DTYPE, SparsityConfig
from .pruner import KEY, VALUE, further_prune, prune_cache

SCHEMA_VERSION = 1
PHASES = ("both", "prefill", "decode")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seq_len: int = 1024
    head_dim: int = 64
    heads: int = 4
    gqa_group: int = 1
    block_size: int = 64
    phase: str = "both"
    s_key_prefill: float = 0.5
    s_value_prefill: float = 1.0
    s_key_decode: float = 0.5
    s_value_decode: float = 1.0
    sink_tokens: int = 64
    local_window: int = 256
    b_r: int = 64
    splits: int = 4
    causal: bool = True
    seed: int = 0
    output: str | None = None

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        for name in ("seq_len", "head_dim", "heads", "gqa_group", "block_size", "b_r", "splits"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.heads % self.gqa_group:
            raise ConfigError(
                f"heads ({self.heads}) must be a multiple of gqa_group ({self.gqa_group})"
            )
        if self.head_dim % 4:
            raise ConfigError(f"head_dim must be a multiple of 4 for 2:4 keys, got {self.head_dim}")
        if self.block_size % 4:
            raise ConfigError(f"block_size must be a multiple of 4, got {self.block_size}")
        for name in ("s_key_prefill", "s_value_prefill", "s_key_decode", "s_value_decode"):
            s = getattr(self, name)
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {s}")
        if self.sink_tokens < 0 or self.local_window < 0:
            raise ConfigError("sink_tokens and local_window must be non-negative")

    @property
    def kv_heads(self) -> int:
        return self.heads // self.gqa_group

    def sparsity(self, phase: str) -> SparsityConfig:
        sk, sv = (
            (self.s_key_decode, self.s_value_decode) if phase == DECODE
            else (self.s_key_prefill, self.s_value_prefill)
        )
        return SparsityConfig(sk, sv, self.block_size, sink_tokens=self.sink_tokens,
                              local_window=self.local_window)


def synthetic_qkv(cfg: RunConfig):
    """Unit-Gaussian Q, K, V scaled by 1/sqrt(d), plus one decode query per head."""
    rng = np.random.default_rng(cfg.seed)
    s = 1.0 / np.sqrt(cfg.head_dim)
    L, d = cfg.seq_len, cfg.head_dim
    q = (rng.standard_normal((cfg.heads, L, d)) * s).astype(WORK_DTYPE)
    k = (rng.standard_normal((cfg.kv_heads, L, d)) * s).astype(WORK_DTYPE)
    v = (rng.standard_normal((cfg.kv_heads, L, d)) * s).astype(WORK_DTYPE)
    q_dec = (rng.standard_normal((cfg.heads, 1, d)) * s).astype(WORK_DTYPE)
    return q, k, v, q_dec


def _errors(out: np.ndarray, ref: np.ndarray) -> dict:
    diff = np.abs(out.astype(np.float64) - ref.astype(np.float64))
    return {"max_abs": float(diff.max()), "mean_abs": float(diff.mean())}


def _compression(keys, values, p: SparsityConfig) -> dict:
    ks = sum((measure_size(c) for c in keys), SizeBreakdown())
    vs = sum((measure_size(c) for c in values), SizeBreakdown())
    total = ks + vs
    blocks = sum(c.num_blocks for c in keys)
    achieved_k = sum(c.sparse_count for c in keys) / blocks
    achieved_v = sum(c.sparse_count for c in values) / blocks
    head = keys[0]
    achieved = cost.CostParams(head.seq_len, head.head_dim, head.block_size, achieved_k, achieved_v)
    configured = cost.CostParams(head.seq_len, head.head_dim, head.block_size, p.s_key, p.s_value)
    return {
        "key": ks.as_dict(),
        "value": vs.as_dict(),
        "total": total.as_dict(),
        "achieved_s_key": achieved_k,
        "achieved_s_value": achieved_v,
        "r_comp_measured": total.ratio,
        "r_comp_model_exact": cost.compression_ratio(achieved, exact=True),
        "r_comp_model_configured": cost.compression_ratio(configured),
    }


def _compress_all(k, v, masks, p: SparsityConfig):
    keys = [fused_magnitude_compress(k[h], km.block, p, KEY) for h, (km, _) in enumerate(masks)]
    values = [fused_magnitude_compress(v[h], vm.block, p, VALUE) for h, (_, vm) in enumerate(masks)]
    return keys, values


def run_pipeline(cfg: RunConfig) -> dict:
    """Prefill at prefill sparsity, prune further, then one decode step.

    Returns a JSON-ready report. Only the ``timings`` section varies between
    runs with the same config.
    """
    cfg.validate()
    timings = {}
    t0 = time.perf_counter()
    q, k, v, q_dec = synthetic_qkv(cfg)
    timings["generate"] = time.perf_counter() - t0

    pre = cfg.sparsity("prefill")
    dec = cfg.sparsity(DECODE)
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(cfg),
        "compression": {},
        "accuracy": {},
        "counts": {},
        "model": {
            "speedup_prefill": cost.prefill_speedup(
                cost.CostParams(cfg.seq_len, cfg.head_dim, cfg.block_size, pre.s_key, pre.s_value)),
            "speedup_decode": cost.decode_speedup(
                cost.CostParams(cfg.seq_len, cfg.head_dim, cfg.block_size, dec.s_key, dec.s_value)),
        },
    }

    t0 = time.perf_counter()
    masks = [prune_cache(k[h], v[h], pre) for h in range(cfg.kv_heads)]
    keys, values = _compress_all(k, v, masks, pre)
    timings["prune_compress_prefill"] = time.perf_counter() - t0
    report["compression"]["prefill"] = _compression(keys, values, pre)

    if cfg.phase in ("both", "prefill"):
        w = AttentionWorkload(q, keys, values, causal=cfg.causal)
        tiles = TileConfig(cfg.b_r, cfg.block_size)
        t0 = time.perf_counter()
        out = prefill_attention(w, tiles)
        timings["prefill_attention"] = time.perf_counter() - t0
        raw = AttentionWorkload(q, list(k), list(v), causal=cfg.causal)
        report["accuracy"]["prefill"] = {
            "vs_decompressed": _errors(out, workload_oracle(w)),
            "vs_raw": _errors(out, workload_oracle(raw)),
        }
        sparse_flops, nbytes = flop_and_byte_count(w, tiles)
        dense_flops, _ = flop_and_byte_count(w, tiles, all_dense=True)
        report["counts"]["prefill"] = {
            "flops": sparse_flops,
            "dense_flops": dense_flops,
            "flop_speedup": dense_flops / sparse_flops if sparse_flops else 1.0,
        }

    if cfg.phase in ("both", DECODE):
        t0 = time.perf_counter()
        masks = [
            (further_prune(k[h], km, dec, dec.s_key), further_prune(v[h], vm, dec, dec.s_value))
            for h, (km, vm) in enumerate(masks)
        ]
        keys, values = _compress_all(k, v, masks, dec)
        timings["reprune_compress_decode"] = time.perf_counter() - t0
        report["compression"]["decode"] = _compression(keys, values, dec)
        w = AttentionWorkload(q_dec, keys, values, phase=DECODE)
        t0 = time.perf_counter()
        out = decode_attention(w, cfg.splits)
        timings["decode_attention"] = time.perf_counter() - t0
        raw = AttentionWorkload(q_dec, list(k), list(v), phase=DECODE)
        report["accuracy"]["decode"] = {
            "vs_decompressed": _errors(out, workload_oracle(w)),
            "vs_raw": _errors(out, workload_oracle(raw)),
        }
        _, nbytes = flop_and_byte_count(w)
        dense_bytes = 2 * cfg.kv_heads * cfg.seq_len * cfg.head_dim * 2
        report["counts"]["decode"] = {
            "bytes": nbytes,
            "dense_bytes": dense_bytes,
            "byte_speedup": dense_bytes / nbytes,
        }

    report["timings"] = timings
    return report


def report_json(report: dict, include_timings: bool = True) -> str:
    """Canonical JSON; floats keep full precision via ``repr``."""
    if not include_timings:
        report = {k: v for k, v in report.items() if k != "timings"}
    return json.dumps(report, sort_keys=True, indent=2)


def compress_for_config(cfg: RunConfig, which: str = KEY, head: int = 0):
    """Prefill-sparsity compressed cache of one KV head, as ``save-cache`` writes it."""
    cfg.validate()
    if not 0 <= head < cfg.kv_heads:
        raise ConfigError(f"head must lie in [0, {cfg.kv_heads}), got {head}")
    _, k, v, _ = synthetic_qkv(cfg)
    pre = cfg.sparsity("prefill")
    km, vm = prune_cache(k[head], v[head], pre)
    if which == KEY:
        return fused_magnitude_compress(k[head], km.block, pre, KEY), k[head] * km.element
    return fused_magnitude_compress(v[head], vm.block, pre, VALUE), v[head] * vm.element
