"""Plane snapshot persistence.

Binary layout (all little-endian):

    bytes 0..3    magic b"MPO1"
    bytes 4..11   n, unsigned 64-bit
    then          w_origin, w_up, phi_right as three float64[n] arrays
    then          scale, one float64
    last 4 bytes  CRC32 of the payload (everything between magic and CRC)

An optional JSON sidecar at ``<path>.json`` records the model-spec hash
and the training configuration that produced the plane.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import SnapshotCrcError, SnapshotLengthError, SnapshotMagicError
from .plane import PlaneParams

MAGIC = b"MPO1"


def save_plane(plane: PlaneParams, path, sidecar: dict | None = None) -> Path:
    """Write a plane snapshot; round-trips bit-exactly through load_plane."""
    path = Path(path)
    n = plane.n
    payload = struct.pack("<Q", n)
    payload += plane.w_origin.astype("<f8").tobytes()
    payload += plane.w_up.astype("<f8").tobytes()
    payload += plane.phi_right.astype("<f8").tobytes()
    payload += struct.pack("<d", plane.scale)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path.write_bytes(MAGIC + payload + struct.pack("<I", crc))
    if sidecar is not None:
        path.with_name(path.name + ".json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_plane(path) -> PlaneParams:
    """Read and validate a plane snapshot (magic, length, CRC32)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise SnapshotMagicError(f"{path}: magic {data[:4]!r} is not {MAGIC!r} "
                                 "(unsupported version or not a snapshot)")
    if len(data) < 16:
        raise SnapshotLengthError(f"{path}: file too short for a header")
    (n,) = struct.unpack_from("<Q", data, 4)
    expected = 4 + 8 + 3 * 8 * n + 8 + 4
    if len(data) != expected:
        raise SnapshotLengthError(f"{path}: {len(data)} bytes, but n={n} "
                                  f"requires exactly {expected}")
    payload = data[4:-4]
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise SnapshotCrcError(f"{path}: payload CRC mismatch")
    vecs = np.frombuffer(payload, dtype="<f8", count=3 * n + 1, offset=8)
    return PlaneParams(w_origin=vecs[:n].copy(), w_up=vecs[n:2 * n].copy(),
                       phi_right=vecs[2 * n:3 * n].copy(),
                       scale=float(vecs[3 * n]))


def load_sidecar(path) -> dict | None:
    """Read the JSON sidecar next to a snapshot, if present."""
    sidecar = Path(path).with_name(Path(path).name + ".json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())
