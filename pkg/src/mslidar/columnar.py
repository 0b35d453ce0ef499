"""Portable "MST1" columnar point-cloud file format.

Layout, all little-endian, no padding:

    offset  size  field
    0       4     magic b"MST1"
    4       2     format version (currently 1), u16
    6       2     optional-column presence bitmap, u16
    8       8     point count, u64
    16      4     CRS note byte length L, u32
    20      L     CRS note, UTF-8
    20+L    ...   contiguous column arrays

Column arrays follow in fixed order: x, y, z (f64), channel (u8), then
every optional column whose bit is set in the bitmap, in the canonical
order of ``cloud.OPTIONAL_COLUMNS`` (f32 attributes, u8 enums/bools).
Bit i of the bitmap corresponds to the i-th canonical optional column.
The format is bit-exact: read(write(c)) reproduces every array byte
for byte, including NaN payloads.
"""

import io
import struct
from pathlib import Path

import numpy as np

from .cloud import OPTIONAL_COLUMNS, PointCloud
from .errors import DataError

MAGIC = b"MST1"
VERSION = 1

_HEADER = struct.Struct("<4sHHQI")
_CANONICAL = tuple(OPTIONAL_COLUMNS)  # bit order of the presence bitmap


def _storage_dtype(name: str) -> np.dtype:
    dtype = OPTIONAL_COLUMNS[name]
    return np.dtype(np.uint8) if dtype == np.dtype(bool) else dtype


def write_columnar(cloud: PointCloud, path) -> None:
    """Write a cloud to `path` in MST1 format."""
    path = Path(path)
    bitmap = 0
    for i, name in enumerate(_CANONICAL):
        if cloud.has(name):
            bitmap |= 1 << i
    note = cloud.crs_note.encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, bitmap, cloud.count, len(note)))
    buf.write(note)
    for name in ("x", "y", "z", "channel"):
        buf.write(np.ascontiguousarray(getattr(cloud, name)).tobytes())
    for name in _CANONICAL:
        if cloud.has(name):
            col = getattr(cloud, name).astype(_storage_dtype(name), copy=False)
            buf.write(np.ascontiguousarray(col).tobytes())
    path.write_bytes(buf.getvalue())


def read_columnar(path) -> PointCloud:
    """Read an MST1 file; bit-exact inverse of :func:`write_columnar`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: file too short for an MST1 header")
    magic, version, bitmap, count, note_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, not an MST1 file")
    if version != VERSION:
        raise DataError(
            f"{path}: unsupported MST1 version {version} (reader supports {VERSION})"
        )
    offset = _HEADER.size
    if len(raw) < offset + note_len:
        raise DataError(f"{path}: truncated CRS note")
    note = raw[offset : offset + note_len].decode("utf-8")
    offset += note_len

    names = ["x", "y", "z", "channel"]
    dtypes = [np.dtype("<f8")] * 3 + [np.dtype(np.uint8)]
    for i, name in enumerate(_CANONICAL):
        if bitmap & (1 << i):
            names.append(name)
            dtypes.append(_storage_dtype(name).newbyteorder("<"))
    expected = offset + count * sum(d.itemsize for d in dtypes)
    if len(raw) != expected:
        raise DataError(
            f"{path}: column length mismatch, header declares {count} points "
            f"({expected} bytes) but file holds {len(raw)} bytes"
        )

    cols = {}
    for name, dtype in zip(names, dtypes):
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).copy()
        offset += nbytes
        if OPTIONAL_COLUMNS.get(name) == np.dtype(bool):
            arr = arr.astype(bool)
        cols[name] = arr
    return PointCloud(crs_note=note, **cols)


def read_labels(path, expected_count: int | None = None) -> np.ndarray:
    """Read externally produced labels: plain text, one integer per line.

    Rows align with the points of a named columnar file, which lets
    predictions from other tools be scored without conversion.
    """
    path = Path(path)
    values = []
    try:
        fh = path.open("r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read labels from {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError:
                raise DataError(
                    f"{path}:{lineno}: expected an integer label, got {line!r}"
                ) from None
            if not 0 <= value <= 255:
                raise DataError(
                    f"{path}:{lineno}: label {value} outside the u8 range"
                )
            values.append(value)
    labels = np.asarray(values, dtype=np.uint8)
    if expected_count is not None and labels.shape[0] != expected_count:
        raise DataError(
            f"{path}: {labels.shape[0]} labels for {expected_count} points"
        )
    return labels
