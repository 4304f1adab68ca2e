"""Named-tensor checkpoint files.

Byte layout::

    offset 0   8 bytes   magic b"CTNASW01"
    offset 8   8 bytes   header length N, unsigned little-endian
    offset 16  N bytes   UTF-8 JSON header
    offset 16+N          tensor data, little-endian float32, row-major

The header maps each tensor name to ``{"shape": [...], "dtype": "<f4",
"offset": k, "nbytes": n}`` where ``offset`` counts bytes from the start
of the data section. Tensors are written in header order, back to back.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = b"CTNASW01"


class CheckpointError(ValueError):
    pass


def save(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    header = OrderedDict()
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header[name] = {"shape": list(np.shape(arr)), "dtype": "<f4", "offset": offset, "nbytes": len(data)}
        blobs.append(data)
        offset += len(data)
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    base = 16 + hlen
    out = OrderedDict()
    for name, entry in header.items():
        start = base + entry["offset"]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["dtype"] != "<f4" or entry["nbytes"] != 4 * count:
            raise CheckpointError(f"{path}: tensor {name!r} has inconsistent dtype/size")
        if start + entry["nbytes"] > len(buf):
            raise CheckpointError(f"{path}: tensor {name!r} runs past end of file")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
        out[name] = arr.reshape(entry["shape"]).astype(np.float32)
    return out
