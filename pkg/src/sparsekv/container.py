"""Binary file image of a :class:`CompressedCache`.

Layout (all integers little-endian)::

    magic      8s   b"HSPARSE\\0"
    version    u16  1
    header     block_size u32, head_dim u32, seq_len u32, blocks u32,
               dense_count u32, sparse_count u32, n_keep u8, m_group u8,
               element width tag u8 (2 = float16), axis u8 (0 key, 1 value),
               s_key f64, s_value f64, sink_tokens u32, local_window u32
    sections   index_map (i16), dense_pool (f16), nnz_pool (f16), meta_pool (u16),
               each as u64 byte length followed by the payload

Scalars are rounded to float16 (nearest-even) on write.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .compressor import CompressedCache, _empty_pools
from .core import WORK_DTYPE, NmPattern, SparsityConfig
from .pruner import AXES

MAGIC = b"HSPARSE\0"
VERSION = 1
FLOAT16_TAG = 2

_PREAMBLE = struct.Struct("<8sH")
_HEADER = struct.Struct("<IIIIIIBBBBddII")
_LENGTH = struct.Struct("<Q")
SECTIONS = ("index_map", "dense_pool", "nnz_pool", "meta_pool")
_DTYPES = {
    "index_map": np.dtype("<i2"),
    "dense_pool": np.dtype("<f2"),
    "nnz_pool": np.dtype("<f2"),
    "meta_pool": np.dtype("<u2"),
}


class ContainerError(ValueError):
    """Malformed cache container; the message names the byte offset."""


def to_storage(c: CompressedCache) -> CompressedCache:
    """Round pools to float16 storage precision, returned in working precision."""
    return CompressedCache(
        c.dense_pool.astype(np.float16).astype(WORK_DTYPE),
        c.nnz_pool.astype(np.float16).astype(WORK_DTYPE),
        c.meta_pool,
        c.index_map,
        c.seq_len,
        c.head_dim,
        c.axis,
        c.cfg,
    )


def serialize(c: CompressedCache) -> bytes:
    cfg = c.cfg
    parts = [
        _PREAMBLE.pack(MAGIC, VERSION),
        _HEADER.pack(
            cfg.block_size, c.head_dim, c.seq_len, c.num_blocks,
            c.dense_count, c.sparse_count,
            cfg.pattern.n_keep, cfg.pattern.m_group, FLOAT16_TAG, AXES.index(c.axis),
            cfg.s_key, cfg.s_value, cfg.sink_tokens, cfg.local_window,
        ),
    ]
    arrays = (c.index_map, c.dense_pool, c.nnz_pool, c.meta_pool)
    for name, arr in zip(SECTIONS, arrays):
        payload = np.ascontiguousarray(arr).astype(_DTYPES[name]).tobytes()
        parts.append(_LENGTH.pack(len(payload)))
        parts.append(payload)
    return b"".join(parts)


def parse(data: bytes) -> CompressedCache:
    """Validate and decode a container image.

    Magic and version are checked before anything else is read, and each
    section length is checked against both the header and the bytes actually
    present before any array is built.
    """
    view = memoryview(data)
    if len(view) < _PREAMBLE.size:
        raise ContainerError(f"offset 0: file is {len(view)} bytes, shorter than the preamble")
    magic, version = _PREAMBLE.unpack_from(view, 0)
    if magic != MAGIC:
        raise ContainerError(f"offset 0: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"offset 8: unsupported version {version}")
    pos = _PREAMBLE.size
    if len(view) < pos + _HEADER.size:
        raise ContainerError(f"offset {pos}: truncated header")
    (B, d, seq_len, blocks, dense, sparse, n_keep, m_group, width, axis,
     s_key, s_value, sink, window) = _HEADER.unpack_from(view, pos)
    header_at = pos
    pos += _HEADER.size
    if width != FLOAT16_TAG:
        raise ContainerError(f"offset {header_at + 26}: unknown element width tag {width}")
    if axis >= len(AXES):
        raise ContainerError(f"offset {header_at + 27}: unknown axis tag {axis}")
    if dense + sparse != blocks:
        raise ContainerError(
            f"offset {header_at}: dense_count {dense} + sparse_count {sparse} != blocks {blocks}"
        )
    try:
        cfg = SparsityConfig(s_key, s_value, B, NmPattern(n_keep, m_group), sink, window)
    except ValueError as exc:
        raise ContainerError(f"offset {header_at}: invalid header: {exc}") from None
    if blocks != -(-seq_len // B):
        raise ContainerError(f"offset {header_at}: {blocks} blocks cannot hold {seq_len} tokens")

    # shapes from the header; zero-size templates allocate nothing
    dense_t, nnz_t, meta_t = _empty_pools(cfg, d, AXES[axis], 0, 0)
    shapes = {
        "index_map": (blocks,),
        "dense_pool": (dense,) + dense_t.shape[1:],
        "nnz_pool": (sparse,) + nnz_t.shape[1:],
        "meta_pool": (sparse,) + meta_t.shape[1:],
    }
    arrays = {}
    for name in SECTIONS:
        if len(view) < pos + _LENGTH.size:
            raise ContainerError(f"offset {pos}: truncated before {name} length")
        (length,) = _LENGTH.unpack_from(view, pos)
        pos += _LENGTH.size
        expected = int(np.prod(shapes[name])) * _DTYPES[name].itemsize
        if length != expected:
            raise ContainerError(
                f"offset {pos - _LENGTH.size}: {name} length {length} != {expected} from header"
            )
        if len(view) < pos + length:
            raise ContainerError(
                f"offset {pos}: {name} truncated, {len(view) - pos} of {length} bytes present"
            )
        arr = np.frombuffer(view[pos:pos + length], dtype=_DTYPES[name])
        arrays[name] = arr.reshape(shapes[name])
        pos += length
    if pos != len(view):
        raise ContainerError(f"offset {pos}: {len(view) - pos} trailing bytes")

    index_map = arrays["index_map"].astype(np.int16)
    if np.any(index_map == 0):
        raise ContainerError(f"offset {_index_offset()}: zero index map entry")
    if int((index_map > 0).sum()) != dense or int((index_map < 0).sum()) != sparse:
        raise ContainerError(f"offset {_index_offset()}: index map signs disagree with header counts")
    for sign, count in ((1, dense), (-1, sparse)):
        slots = np.sort(index_map[index_map * sign > 0].astype(np.int64) * sign)
        if not np.array_equal(slots, np.arange(1, count + 1)):
            raise ContainerError(f"offset {_index_offset()}: index map does not cover its pool once")
    return CompressedCache(
        arrays["dense_pool"].astype(WORK_DTYPE),
        arrays["nnz_pool"].astype(WORK_DTYPE),
        arrays["meta_pool"].astype(np.uint16),
        index_map,
        seq_len,
        d,
        AXES[axis],
        cfg,
    )


def _index_offset() -> int:
    return _PREAMBLE.size + _HEADER.size + _LENGTH.size


def save_cache(path: str | os.PathLike, c: CompressedCache) -> int:
    data = serialize(c)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_cache(path: str | os.PathLike) -> CompressedCache:
    with open(path, "rb") as f:
        return parse(f.read())
