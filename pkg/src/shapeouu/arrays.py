"""Versioned binary array files and digest-checked manifests.

Format: 16-byte header (magic "SDK1", uint32 rank, uint32 d0, uint32 d1,
little-endian) followed by row-major little-endian float64 data.  Rank is
1 or 2; rank-1 files set d1 = 0.  Higher-rank data is stored flattened to
rank 2 with the logical shape recorded in the run manifest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDK1"
_HEADER = struct.Struct("<4sIII")


def write_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    if arr.ndim == 1:
        header = _HEADER.pack(MAGIC, 1, arr.shape[0], 0)
    elif arr.ndim == 2:
        header = _HEADER.pack(MAGIC, 2, arr.shape[0], arr.shape[1])
    else:
        raise ValueError(f"only rank-1/2 arrays are stored, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, rank, d0, d1 = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if rank == 1:
            shape = (d0,)
        elif rank == 2:
            shape = (d0, d1)
        else:
            raise ValueError(f"{path}: unsupported rank {rank}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {data.size}")
    return data.reshape(shape).astype(float)


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def verify_files(directory, digests: dict) -> None:
    """Check that every referenced file exists and matches its digest."""
    directory = Path(directory)
    for name, digest in digests.items():
        target = directory / name
        if not target.exists():
            raise ValueError(f"manifest references missing file {name}")
        actual = sha256_of(target)
        if actual != digest:
            raise ValueError(f"digest mismatch for {name}: {actual} != {digest}")


def export_csv(array_path, csv_path) -> None:
    arr = read_array(array_path)
    np.savetxt(csv_path, np.atleast_2d(arr), delimiter=",", fmt="%.17g")
