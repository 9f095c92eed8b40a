"""Flat binary artifacts: a JSON header followed by raw little-endian arrays.

Layout::

    8 bytes   magic  b"GACTGAN\\0"
    8 bytes   header length H (uint64, little endian)
    H bytes   UTF-8 JSON header (sorted keys); ``header["arrays"]`` lists
              ``{"name", "dtype", "shape", "offset", "nbytes"}`` with offsets
              relative to the end of the header
    ...       array payloads, C order, back to back

Output bytes depend only on the header and array contents, so identical
inputs give hash-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GACTGAN\x00"
POSTERIOR_FORMAT = "gactgan-posterior/1"
CHECKPOINT_FORMAT = "gactgan-checkpoint/1"


def write_artifact(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header)
    table = []
    payload = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        table.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}
        )
        payload.append(arr.tobytes())
        offset += arr.nbytes
    header["arrays"] = table
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)
    tmp.replace(path)


def read_artifact(path, expect_format: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a gactgan artifact")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    if expect_format is not None and header.get("format") != expect_format:
        raise ValueError(f"{path}: expected format {expect_format!r}, found {header.get('format')!r}")
    base = 16 + hlen
    arrays = {}
    for entry in header.pop("arrays"):
        start = base + entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def descriptor_hash(descriptor: dict) -> str:
    blob = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
