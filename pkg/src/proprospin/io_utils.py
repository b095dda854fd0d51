"""Persistence: checkpoint container, CSV logs, atomic file writes.

Checkpoint layout (all integers little-endian):

    bytes 0-3    magic b"PTCK"
    bytes 4-7    format version, u32
    bytes 8-11   metadata length M, u32
    bytes 12-..  metadata, UTF-8 JSON; its "arrays" entry is the shape
                 table: an ordered list of [name, shape] pairs
    ...          payload: the tables' arrays as float32, concatenated in
                 table order, C layout
    last 4       CRC32 of everything before it, u32

Every write in this module goes through a temp file in the target
directory followed by an atomic rename, so readers never observe a
partially written artifact.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
import zlib
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PTCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Base class for checkpoint read failures."""


class CorruptCheckpointError(CheckpointError):
    """Truncated file, bad magic, or CRC mismatch."""


class IncompatibleCheckpointError(CheckpointError):
    """Version or architecture mismatch."""


def atomic_write_bytes(path: str, blob: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, arrays: dict[str, np.ndarray],
                    metadata: dict | None = None) -> None:
    """Serialize named float arrays plus JSON metadata."""
    meta = dict(metadata or {})
    table = []
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append([name, list(a.shape)])
        payload += a.tobytes()
    meta["arrays"] = table
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
    body = head + bytes(payload)
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    atomic_write_bytes(path, blob)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (metadata, arrays); raises on any corruption."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError(f"{path}: CRC mismatch")
    version, meta_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {version}, this build reads {VERSION}")
    meta_end = 12 + meta_len
    meta = json.loads(blob[12:meta_end].decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    off = meta_end
    for name, shape in meta["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        raw = blob[off:off + nbytes]
        if len(raw) != nbytes:
            raise CorruptCheckpointError(f"{path}: payload shorter than shape table")
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        off += nbytes
    if off != len(blob) - 4:
        raise CorruptCheckpointError(f"{path}: trailing bytes after payload")
    return meta, arrays


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Atomic CSV write; floats rendered with repr round-trip fidelity."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            # np.float64 subclasses float but repr()s as np.float64(...);
            # plain-float repr is the shortest digit string that round-trips
            if isinstance(v, (float, np.floating)):
                cells.append(repr(float(v)))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def read_csv_columns(path: str) -> dict[str, list[str]]:
    header, rows = read_csv(path)
    return {name: [r[i] for r in rows] for i, name in enumerate(header)}
