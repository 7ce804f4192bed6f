"""Binary checkpoint format.

Layout (all little-endian)::

    b"ULMV"  | u32 version | u32 n_ints | i64[n_ints] config block
    repeated: u32 name_len | name (utf-8) | u32 rank | u64[rank] extents | f64[prod] values

The config block is ``[len(channels), *channels, in_channels, input_size,
branches_per_pvm, conv_stages, pvm_stages, d_state, expand, conv_k, dt_rank,
head_hidden, num_outputs, bidirectional]``.  Records hold every trainable
tensor followed by the batch-norm buffers, in store order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .arch import ModelConfig, ParamStore, config_as_ints, config_from_ints, init_params

MAGIC = b"ULMV"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(cfg: ModelConfig, store: ParamStore) -> bytes:
    ints = config_as_ints(cfg)
    parts = [MAGIC, struct.pack("<II", VERSION, len(ints)), struct.pack(f"<{len(ints)}q", *ints)]
    for name, arr in store.arrays().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, cfg: ModelConfig, store: ParamStore) -> None:
    Path(path).write_bytes(checkpoint_bytes(cfg, store))


def parse_checkpoint(blob: bytes) -> tuple[ModelConfig, ParamStore]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a ULMV checkpoint")
    try:
        version, n_ints = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        ints = struct.unpack_from(f"<{n_ints}q", blob, off)
        off += 8 * n_ints
        cfg = config_from_ints(ints)
        records = {}
        while off < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if off + 8 * count > len(blob):
                raise CheckpointError(f"truncated record {name}")
            records[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None

    store = init_params(cfg)
    expected = store.arrays()
    if set(records) != set(expected):
        missing = sorted(set(expected) - set(records))
        extra = sorted(set(records) - set(expected))
        raise CheckpointError(f"checkpoint tensors do not match config (missing {missing[:5]}, "
                              f"unexpected {extra[:5]})")
    for name, arr in records.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != expected {expected[name].shape}")
        if name in store.params:
            store.params[name].data = arr.astype(np.float64)
        else:
            store.buffers[name] = arr.astype(np.float64)
    return cfg, store


def load_checkpoint(path) -> tuple[ModelConfig, ParamStore]:
    return parse_checkpoint(Path(path).read_bytes())
