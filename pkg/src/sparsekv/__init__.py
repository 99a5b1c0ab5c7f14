"""Block-sparse N:M KV-cache compression with a mixed dense/sparse attention engine."""

from .attention import (
    AttentionWorkload,
    TileConfig,
    decode_attention,
    dense_attention_oracle,
    flop_and_byte_count,
    prefill_attention,
    sparse_gemm_emulated,
)
from .compressor import CompressedCache, compress, decompress, fused_magnitude_compress, measure_size
from .container import load_cache, parse, save_cache, serialize
from .core import GroupMetadata, NmPattern, SparsityConfig, expand_sparse, pack_metadata, unpack_metadata
from .cost import CostParams, compression_ratio, decode_speedup, design_space_table, prefill_speedup
from .pruner import block_loss, element_mask, prune_cache, select_blocks

__version__ = "0.1.0"
