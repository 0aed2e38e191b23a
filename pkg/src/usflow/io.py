"""Binary field snapshots, operator cache files and fixed-format CSV.

Snapshot layout (little-endian)::

    magic   4s   b"USFB"
    version u16
    R       f64
    N       u32
    gamma   f64
    b0      f64
    payload f64 * N^3   (node order of :class:`~usflow.grid.VelocityGrid`)
    crc32   u32         (of the payload bytes)

Operator caches use the same header under the magic ``b"USFK"``, followed by
a JSON metadata block (``u32`` length + UTF-8) and a payload of named
row-major ``f64`` arrays listed in the metadata.  The CRC covers the
metadata and the payload.
"""
from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import VelocityGrid, build_grid, field_checksum, maxwellian
from .linearized import CalKMatrix, OperatorCache, orthonormal_invariants

FIELD_MAGIC = b"USFB"
CACHE_MAGIC = b"USFK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHdIdd")
_U32 = struct.Struct("<I")


class SnapshotError(OSError):
    """Malformed, truncated or corrupted binary file."""


@dataclass(frozen=True)
class SnapshotHeader:
    version: int
    R: float
    N: int
    gamma: float
    b0: float


def _pack_header(magic: bytes, grid: VelocityGrid, gamma: float, b0: float) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, float(grid.R), int(grid.N), float(gamma), float(b0))


def _unpack_header(raw: bytes, magic: bytes, path) -> SnapshotHeader:
    if len(raw) < _HEADER.size:
        raise SnapshotError(f"{path}: truncated header")
    m, version, R, N, gamma, b0 = _HEADER.unpack_from(raw)
    if m != magic:
        raise SnapshotError(f"{path}: bad magic {m!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"{path}: unsupported format version {version}")
    return SnapshotHeader(version, R, N, gamma, b0)


def write_snapshot(path, grid: VelocityGrid, values: np.ndarray, gamma: float, b0: float) -> None:
    grid.check(values)
    payload = np.ascontiguousarray(values, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(_pack_header(FIELD_MAGIC, grid, gamma, b0))
        fh.write(payload)
        fh.write(_U32.pack(zlib.crc32(payload)))


def read_snapshot(path) -> tuple[SnapshotHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    hdr = _unpack_header(raw, FIELD_MAGIC, path)
    n = hdr.N ** 3
    end = _HEADER.size + 8 * n
    if len(raw) != end + _U32.size:
        raise SnapshotError(f"{path}: expected {n} values, file size {len(raw)} does not match")
    payload = raw[_HEADER.size:end]
    (crc,) = _U32.unpack_from(raw, end)
    if crc != zlib.crc32(payload):
        raise SnapshotError(f"{path}: CRC32 mismatch")
    return hdr, np.frombuffer(payload, dtype="<f8").astype(float)


# ---------------------------------------------------------------------------
# operator caches
# ---------------------------------------------------------------------------

def _write_arrays(path, grid: VelocityGrid, gamma: float, b0: float, meta: dict, arrays: dict) -> None:
    meta = dict(meta)
    meta["arrays"] = [[name, list(a.shape)] for name, a in arrays.items()]
    mb = json.dumps(meta, sort_keys=True).encode()
    crc = zlib.crc32(mb)
    tmp = Path(str(path) + ".part")
    with open(tmp, "wb") as fh:
        fh.write(_pack_header(CACHE_MAGIC, grid, gamma, b0))
        fh.write(_U32.pack(len(mb)))
        fh.write(mb)
        for a in arrays.values():
            buf = np.ascontiguousarray(a, dtype="<f8").tobytes()
            crc = zlib.crc32(buf, crc)
            fh.write(buf)
        fh.write(_U32.pack(crc))
    tmp.replace(path)


def read_cache_meta(path) -> tuple[SnapshotHeader, dict]:
    with open(path, "rb") as fh:
        hdr = _unpack_header(fh.read(_HEADER.size), CACHE_MAGIC, path)
        raw = fh.read(_U32.size)
        if len(raw) < _U32.size:
            raise SnapshotError(f"{path}: truncated metadata")
        mb = fh.read(_U32.unpack(raw)[0])
    try:
        return hdr, json.loads(mb)
    except ValueError as exc:
        raise SnapshotError(f"{path}: unreadable metadata") from exc


def _read_arrays(path) -> tuple[SnapshotHeader, dict, dict]:
    raw = Path(path).read_bytes()
    hdr = _unpack_header(raw, CACHE_MAGIC, path)
    off = _HEADER.size
    (ml,) = _U32.unpack_from(raw, off)
    off += _U32.size
    mb = raw[off:off + ml]
    off += ml
    try:
        meta = json.loads(mb)
    except ValueError as exc:
        raise SnapshotError(f"{path}: unreadable metadata") from exc
    crc = zlib.crc32(mb)
    arrays = {}
    for name, shape in meta["arrays"]:
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(raw) - _U32.size:
            raise SnapshotError(f"{path}: truncated payload in {name!r}")
        buf = raw[off:off + nbytes]
        crc = zlib.crc32(buf, crc)
        arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off + _U32.size != len(raw) or _U32.unpack_from(raw, off)[0] != crc:
        raise SnapshotError(f"{path}: CRC32 mismatch")
    return hdr, meta, arrays


def write_operator_cache(path, cache: OperatorCache, gamma: float, b0: float) -> None:
    meta = {
        "kind": "L", "fingerprint": cache.fingerprint, "eps_sym": cache.eps_sym, "eps_ker": cache.eps_ker,
        "assembly_time": cache.assembly_time, "checksum": cache.checksum,
        "extras": {k: v for k, v in cache.extras.items() if isinstance(v, (int, float, str))},
    }
    arrays = {"core": cache.core, "nu": cache.nu, "L_cons": cache.L_cons, "ker_residuals": cache.ker_residuals}
    _write_arrays(path, cache.grid, gamma, b0, meta, arrays)


def read_operator_cache(path) -> OperatorCache:
    hdr, meta, arr = _read_arrays(path)
    if meta.get("kind") != "L":
        raise SnapshotError(f"{path}: not a linearized-operator cache")
    grid = build_grid(hdr.R, hdr.N)
    mu = maxwellian(grid)
    cache = OperatorCache(
        grid=grid, fingerprint=meta["fingerprint"], mu=mu, nu=arr["nu"], core=arr["core"],
        L_cons=arr["L_cons"], basis=orthonormal_invariants(grid, mu), eps_sym=meta["eps_sym"],
        eps_ker=meta["eps_ker"], ker_residuals=arr["ker_residuals"], assembly_time=meta["assembly_time"],
        checksum=meta["checksum"], extras=dict(meta.get("extras", {})),
    )
    if field_checksum(cache.core) != cache.checksum:
        raise SnapshotError(f"{path}: matrix checksum mismatch")
    return cache


def write_calK(path, K: CalKMatrix, gamma: float, b0: float) -> None:
    _write_arrays(path, K.grid, gamma, b0, {"kind": "calK", "fingerprint": K.fingerprint},
                  {"matrix": K.matrix, "nu": K.nu})


def read_calK(path) -> CalKMatrix:
    hdr, meta, arr = _read_arrays(path)
    if meta.get("kind") != "calK":
        raise SnapshotError(f"{path}: not a calK cache")
    return CalKMatrix(build_grid(hdr.R, hdr.N), meta["fingerprint"], arr["nu"], arr["matrix"])


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def fmt(x) -> str:
    """Lossless decimal text for floats (17 significant digits); ints and strings verbatim."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, columns, rows, fingerprint: str) -> None:
    """Write ``rows`` (sequences aligned with ``columns``) plus a trailing fingerprint column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns) + ["fingerprint"])
        for r in rows:
            if len(r) != len(columns):
                raise ValueError(f"row has {len(r)} values for {len(columns)} columns")
            w.writerow([fmt(v) for v in r] + [fingerprint])


class CSVSchemaError(ValueError):
    pass


def read_csv_columns(path, names) -> dict:
    """Read numeric columns by name; errors carry the offending line number."""
    out = {n: [] for n in names}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVSchemaError(f"{path}:1: empty file") from None
        missing = [n for n in names if n not in header]
        if missing:
            raise CSVSchemaError(f"{path}:1: missing columns {missing}; have {header}")
        idx = [header.index(n) for n in names]
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CSVSchemaError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            for n, k in zip(names, idx):
                try:
                    out[n].append(float(row[k]))
                except ValueError:
                    raise CSVSchemaError(f"{path}:{line}: column {n!r} is not numeric: {row[k]!r}") from None
    return {n: np.array(v) for n, v in out.items()}
