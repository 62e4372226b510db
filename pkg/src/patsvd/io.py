"""Binary containers and checksums.

All containers start with a 7-byte magic ``b"PATSVD" + version`` and store
integers as little-endian u64 and arrays as little-endian f64.  Metadata
blocks are a u64 byte length followed by UTF-8 JSON.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numba
import numpy as np

from .forward import SystemMatrix
from .geometry import BasisGrid, MeasurementGeometry
from .svd import SvdFactors

MATRIX_MAGIC = b"PATSVD\x01"
FACTORS_MAGIC = b"PATSVD\x02"
NETWORK_MAGIC = b"PATSVD\x03"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ContainerError(ValueError):
    pass


@numba.njit(cache=True)
def _fnv1a(data, h):
    prime = np.uint64(FNV_PRIME)
    for b in data:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes | bytearray | memoryview | np.ndarray, seed: int = FNV_OFFSET) -> int:
    buf = np.frombuffer(memoryview(data).cast("B"), dtype=np.uint8)
    return int(_fnv1a(buf, np.uint64(seed)))


def file_checksum(path, chunk: int = 1 << 24) -> int:
    h = FNV_OFFSET
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                return h
            h = fnv1a64(block, h)


def checksum_hex(value: int) -> str:
    return f"{value:016x}"


def _meta_bytes(meta: dict) -> bytes:
    body = json.dumps(meta, sort_keys=True, default=_json_default).encode("utf-8")
    return struct.pack("<Q", len(body)) + body


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise ContainerError(f"truncated file while reading {what}")
    return data


def _read_meta(fh):
    (n,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
    return json.loads(_read_exact(fh, n, "metadata").decode("utf-8"))


def _check_magic(fh, magic, path):
    got = fh.read(len(magic))
    if got != magic:
        raise ContainerError(f"{path}: bad magic {got!r}, expected {magic!r}")


def _write_array(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_matrix(path, A: SystemMatrix):
    rows, cols = A.shape
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        _write_array(fh, A.entries)
        fh.write(_meta_bytes(A.describe()))


def open_matrix_writer(path, grid: BasisGrid, geom: MeasurementGeometry):
    """Preallocate a matrix container and return a writable memory map of its entries.

    Call :func:`finish_matrix_file` with the assembled ``SystemMatrix`` afterwards.
    """
    rows, cols = geom.data_size, grid.count
    header = MATRIX_MAGIC + struct.pack("<QQ", rows, cols)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.truncate(len(header) + 8 * rows * cols)
    return np.memmap(path, dtype="<f8", mode="r+", offset=len(header), shape=(rows, cols))


def finish_matrix_file(path, A: SystemMatrix):
    if isinstance(A.entries, np.memmap):
        A.entries.flush()
    with open(path, "ab") as fh:
        fh.write(_meta_bytes(A.describe()))


def load_matrix(path, mmap: bool = False) -> SystemMatrix:
    path = Path(path)
    with open(path, "rb") as fh:
        _check_magic(fh, MATRIX_MAGIC, path)
        rows, cols = struct.unpack("<QQ", _read_exact(fh, 16, "matrix shape"))
        offset = fh.tell()
        nbytes = 8 * rows * cols
        if mmap:
            fh.seek(offset + nbytes)
            entries = None
        else:
            entries = np.frombuffer(_read_exact(fh, nbytes, "matrix entries"), dtype="<f8")
            entries = entries.reshape(rows, cols).astype(float)
        meta = _read_meta(fh)
    if mmap:
        entries = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=(rows, cols))
    grid = BasisGrid.from_dict(meta.pop("grid"))
    geom = MeasurementGeometry.from_dict(meta.pop("geometry"))
    return SystemMatrix(entries, grid, geom, meta)


def factors_bytes(F: SvdFactors) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in (F.sigma, F.U.T, F.V.T))


def factors_checksum(F: SvdFactors) -> int:
    return fnv1a64(factors_bytes(F))


def save_factors(path, F: SvdFactors, meta: dict | None = None):
    """u vectors and v vectors are stored one vector per row."""
    with open(path, "wb") as fh:
        fh.write(FACTORS_MAGIC)
        fh.write(struct.pack("<QQQ", F.rank, F.data_dim, F.coeff_dim))
        fh.write(factors_bytes(F))
        fh.write(_meta_bytes({**F.metadata, "rank_cutoff": F.rank_cutoff, **(meta or {})}))


def load_factors(path) -> SvdFactors:
    path = Path(path)
    with open(path, "rb") as fh:
        _check_magic(fh, FACTORS_MAGIC, path)
        r, m, n = struct.unpack("<QQQ", _read_exact(fh, 24, "factor dimensions"))

        def arr(count, what):
            return np.frombuffer(_read_exact(fh, 8 * count, what), dtype="<f8").astype(float)

        sigma = arr(r, "singular values")
        U = arr(r * m, "u vectors").reshape(r, m).T
        V = arr(r * n, "v vectors").reshape(r, n).T
        meta = _read_meta(fh)
    cutoff = float(meta.pop("rank_cutoff", 1e-12))
    return SvdFactors(sigma, np.ascontiguousarray(U), np.ascontiguousarray(V), cutoff, meta)


def write_network_container(path, descriptor: dict, tensors, threshold: float, checksum: int):
    with open(path, "wb") as fh:
        fh.write(NETWORK_MAGIC)
        fh.write(_meta_bytes(descriptor))
        for t in tensors:
            _write_array(fh, t)
        fh.write(struct.pack("<dQ", threshold, checksum))


def read_network_container(path):
    """Returns ``(descriptor, tensors, threshold, checksum)``; tensor shapes come from the descriptor."""
    path = Path(path)
    with open(path, "rb") as fh:
        _check_magic(fh, NETWORK_MAGIC, path)
        descriptor = _read_meta(fh)
        tensors = []
        for spec in descriptor["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * count, spec["name"]), dtype="<f8")
            tensors.append(data.astype(float).reshape(shape))
        threshold, checksum = struct.unpack("<dQ", _read_exact(fh, 16, "trailer"))
    return descriptor, tensors, threshold, checksum


def write_vector(path, values):
    Path(path).write_bytes(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_vector(path) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f8").astype(float)


def write_pgm(path, image, sidecar: bool = True):
    """8-bit binary PGM with min mapped to 0 and max to 255.

    The scale goes to ``<path>.scale.txt`` as ``min max``.  A constant image
    maps to all zeros.
    """
    img = np.asarray(image, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        pix = np.rint((img - lo) / (hi - lo) * 255.0)
    else:
        pix = np.zeros_like(img)
    pix = np.clip(pix, 0, 255).astype(np.uint8)
    h, w = pix.shape
    # PGM rows run top to bottom; flip so the second coordinate points up
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix[::-1].tobytes())
    if sidecar:
        Path(f"{os.fspath(path)}.scale.txt").write_text(f"{lo!r} {hi!r}\n")
    return lo, hi


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ContainerError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the pixels
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    return pix[::-1].copy()
