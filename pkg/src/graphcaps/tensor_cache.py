"""Binary cache for extracted graph tensors.

Byte layout (all integers little-endian):

    offset  size  field
    0       8     magic b"GCTENSR\\0"
    8       4     format version (currently 1)
    12      4     w
    16      4     k
    20      4     d          (label alphabet size; fibers have d+1 channels)
    24      4     graph count
    28      1     procedure  (0 = betweenness, 1 = canonical)
    29      1     flags      (bit 0: naive tie-breaking)
    30      2     reserved (zero)
    32      8     permutation seed as signed int64 (-1 = none)

followed by, per graph in index order:

    4     class label, int32
    4*w*k*(d+1)   tensor values, float32, row-major (w, k, d+1)

Values are one-hot so the float32 round-trip is exact; training converts back
to float64.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .labelling import Procedure
from .tensorize import GraphTensor

MAGIC = b"GCTENSR\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIIBBHq")

_PROC_CODE = {Procedure.BETWEENNESS: 0, Procedure.CANONICAL: 1}
_CODE_PROC = {v: k for k, v in _PROC_CODE.items()}


class CacheError(RuntimeError):
    """Cache file missing, corrupt, or written by an incompatible version."""


def cache_filename(dataset: str, procedure: Procedure, w: int, k: int, seed, naive_ties: bool) -> str:
    seed_part = "noperm" if seed is None else f"seed{seed}"
    naive_part = "-naive" if naive_ties else ""
    return f"{dataset}_{procedure.value}{naive_part}_w{w}_k{k}_{seed_part}.gct"


def save_tensors(
    path: str,
    tensors: list,
    w: int,
    k: int,
    d: int,
    procedure: Procedure,
    seed,
    naive_ties: bool = False,
) -> None:
    flags = 1 if naive_ties else 0
    seed_field = -1 if seed is None else int(seed)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC, VERSION, w, k, d, len(tensors), _PROC_CODE[procedure], flags, 0, seed_field
            )
        )
        for t in tensors:
            if t.data.shape != (w, k, d + 1):
                raise CacheError(f"tensor shape {t.data.shape} != ({w}, {k}, {d + 1})")
            fh.write(struct.pack("<i", t.class_label))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_tensors(path: str) -> dict:
    """Read a cache file; returns {tensors, w, k, d, procedure, seed, naive_ties}."""
    if not os.path.isfile(path):
        raise CacheError(f"cache file not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise CacheError(f"{path}: truncated header")
        magic, version, w, k, d, count, proc_code, flags, _, seed_field = _HEADER.unpack(header)
        if magic != MAGIC:
            raise CacheError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheError(f"{path}: unsupported version {version}")
        if proc_code not in _CODE_PROC:
            raise CacheError(f"{path}: unknown procedure code {proc_code}")
        per_graph = 4 + 4 * w * k * (d + 1)
        tensors = []
        for i in range(count):
            blob = fh.read(per_graph)
            if len(blob) != per_graph:
                raise CacheError(f"{path}: truncated at graph {i}")
            (label,) = struct.unpack_from("<i", blob)
            data = (
                np.frombuffer(blob, dtype="<f4", offset=4)
                .astype(np.float64)
                .reshape(w, k, d + 1)
            )
            tensors.append(GraphTensor(data=data, graph_index=i, class_label=label))
        if fh.read(1):
            raise CacheError(f"{path}: trailing bytes after {count} graphs")
    return {
        "tensors": tensors,
        "w": w,
        "k": k,
        "d": d,
        "procedure": _CODE_PROC[proc_code],
        "seed": None if seed_field == -1 else seed_field,
        "naive_ties": bool(flags & 1),
    }
