"""Binary checkpoint container: config echo + named tensors, bit-exact.

Layout ("YNCK"): magic, version u32, config JSON (u32 length prefix), entry
count u32, then per entry: u32-length name, dtype tag u8 (0=f32, 1=f64),
ndim u8, u32 dims, raw little-endian values. Integers little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError
from .model import YNetConfig, YNetParams, build_model

MAGIC = b"YNCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(params: YNetParams, path) -> None:
    entries = list(params.named_arrays())
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(cfg)) + cfg
    buf += struct.pack("<I", len(entries))
    for name, arr in entries:
        raw = name.encode("utf-8")
        tag = _TAGS[np.dtype(arr.dtype)]
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BB", tag, arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.astype(_DTYPES[tag], copy=False).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, config: YNetConfig | None = None) -> YNetParams:
    """Rebuild params from a checkpoint; ``config`` overrides the echo and
    must agree with the stored tensor shapes."""
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 8 or bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    off = 4
    try:
        (version,) = struct.unpack_from("<I", view, off)
        off += 4
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack_from("<I", view, off)
        off += 4
        stored_cfg = YNetConfig.from_dict(json.loads(bytes(view[off : off + clen]).decode("utf-8")))
        off += clen
        (count,) = struct.unpack_from("<I", view, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, off)
            off += 4
            name = bytes(view[off : off + nlen]).decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BB", view, off)
            off += 2
            if tag not in _DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for tensor {name!r}")
            dims = struct.unpack_from(f"<{ndim}I", view, off)
            off += 4 * ndim
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
            if off + nbytes > len(raw):
                raise CheckpointError(f"truncated data for tensor {name!r} in {path}")
            arr = np.frombuffer(raw, dtype=dtype, count=max(1, int(np.prod(dims, dtype=np.int64))), offset=off)
            arrays[name] = arr.astype(dtype.newbyteorder("=")).reshape(dims)
            off += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint {path}: {e}") from e

    cfg = config or stored_cfg
    first = next(iter(arrays.values())) if arrays else None
    dtype = first.dtype if first is not None else np.float32
    params = build_model(cfg, seed=0, dtype=dtype)
    expected = dict(params.named_arrays())
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"checkpoint tensor set mismatch: {missing}")
    for name, _ in params.named_arrays():
        arr = arrays[name]
        target = expected[name]
        if arr.shape != target.shape:
            raise ShapeError(f"tensor {name!r}: checkpoint shape {arr.shape} vs config shape {target.shape}")
    # assign after all shapes verified so failures leave no partial params
    for name, tensor in params.named_tensors():
        tensor.data = arrays[name].astype(tensor.data.dtype, copy=True) if arrays[name].dtype != tensor.data.dtype else arrays[name].copy()
    for name, bn in params.bn_params():
        bn.state.running_mean = arrays[f"{name}.running_mean"].copy()
        bn.state.running_var = arrays[f"{name}.running_var"].copy()
    return params
