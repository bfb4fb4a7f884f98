"""Exact Hamming-distance search over packed codes, with a binary file format.

File layout ("YNIX"): magic, version u32, k u32, count u64, then per entry a
u32-length-prefixed UTF-8 id, then count * words u64 code words. All integers
little-endian. The in-memory build timestamp is not persisted, so a
save/load/save cycle is byte-identical.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IndexFormatError, YNetError
from .hashing import HashCode

MAGIC = b"YNIX"
VERSION = 1


@dataclass
class HashIndex:
    k: int
    codes: np.ndarray                 # (n, words) uint64, row-contiguous
    ids: tuple[str, ...]
    built_at: float | None = field(default=None, compare=False)

    @property
    def words(self) -> int:
        return (self.k + 63) // 64

    def __len__(self) -> int:
        return len(self.ids)


def build(codes: Sequence[HashCode], ids: Sequence[str]) -> HashIndex:
    if len(codes) == 0:
        raise YNetError("cannot build an index from zero codes")
    if len(codes) != len(ids):
        raise YNetError(f"{len(codes)} codes vs {len(ids)} ids")
    k = codes[0].k
    for c in codes:
        if c.k != k:
            raise YNetError(f"mixed code lengths: {k} and {c.k}")
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise YNetError(f"duplicate id {i!r}")
        seen.add(i)
    packed = np.ascontiguousarray(np.stack([c.bits for c in codes]))
    return HashIndex(k=k, codes=packed, ids=tuple(ids), built_at=time.time())


def build_from_packed(packed: np.ndarray, ids: Sequence[str], k: int) -> HashIndex:
    """Build directly from pre-packed (n, words) uint64 rows."""
    if packed.ndim != 2 or packed.shape[0] == 0:
        raise YNetError("packed codes must be a non-empty (n, words) array")
    if packed.shape[1] != (k + 63) // 64:
        raise YNetError(f"packed width {packed.shape[1]} does not fit k={k}")
    if len(ids) != packed.shape[0]:
        raise YNetError(f"{packed.shape[0]} codes vs {len(ids)} ids")
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise YNetError(f"duplicate id {i!r}")
        seen.add(i)
    return HashIndex(k=k, codes=np.ascontiguousarray(packed.astype(np.uint64)), ids=tuple(ids), built_at=time.time())


def hamming_distances(index: HashIndex, code: HashCode) -> np.ndarray:
    """XOR + popcount of the query against every entry."""
    if code.k != index.k:
        raise YNetError(f"query has {code.k} bits, index has {index.k}")
    x = index.codes ^ code.bits
    return np.bitwise_count(x).sum(axis=1).astype(np.int64)


def query_topk(index: HashIndex, code: HashCode, topk: int) -> list[tuple[str, int]]:
    """Exact scan; ascending distance, ties in insertion order."""
    if topk < 1:
        raise YNetError(f"topk must be >= 1, got {topk}")
    d = hamming_distances(index, code)
    order = np.argsort(d, kind="stable")[: min(topk, len(index))]
    return [(index.ids[i], int(d[i])) for i in order]


def scan_throughput(index: HashIndex, n_queries: int = 100, seed: int = 0) -> float:
    """Measured codes/second for full linear scans; reporting only, no
    correctness contract."""
    rng = np.random.default_rng(seed)
    words = index.words
    queries = rng.integers(0, 2**63, size=(n_queries, words), dtype=np.int64).astype(np.uint64)
    start = time.perf_counter()
    for qw in queries:
        q = HashCode(bits=qw, real=np.zeros(index.k), k=index.k)
        hamming_distances(index, q)
    elapsed = time.perf_counter() - start
    return n_queries * len(index) / elapsed


def save(index: HashIndex, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<IIQ", VERSION, index.k, len(index))
    for i in index.ids:
        raw = i.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
    buf += index.codes.astype("<u8", copy=False).tobytes()
    Path(path).write_bytes(bytes(buf))


def load(path) -> HashIndex:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 4 or bytes(view[:4]) != MAGIC:
        raise IndexFormatError(f"bad magic in {path}")
    off = 4
    try:
        version, k, count = struct.unpack_from("<IIQ", view, off)
        off += 16
        if version != VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        ids = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, off)
            off += 4
            if off + n > len(raw):
                raise IndexFormatError(f"truncated id table in {path}")
            ids.append(bytes(view[off : off + n]).decode("utf-8"))
            off += n
        words = (k + 63) // 64
        nbytes = count * words * 8
        if off + nbytes > len(raw):
            raise IndexFormatError(f"truncated code block in {path}")
        codes = np.frombuffer(raw, dtype="<u8", count=count * words, offset=off)
        codes = codes.astype(np.uint64).reshape(count, words)
    except struct.error as e:
        raise IndexFormatError(f"truncated index file {path}: {e}") from e
    return HashIndex(k=k, codes=np.ascontiguousarray(codes), ids=tuple(ids), built_at=None)
