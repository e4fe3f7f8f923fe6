"""Little-endian binary formats: events (.evt), voxel grids (.vxg), labels (.lbl),
blend masks (.msk), plus 8-bit PGM export.

Writers go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .blend import IGNORE, LabelMap
from .eap import BlendMask
from .errors import FormatError
from .events import EventStream, VoxelGrid

EVT_MAGIC = b"EVT1"
VXG_MAGIC = b"VXG1"
LBL_MAGIC = b"LBL1"
MSK_MAGIC = b"MSK1"

_EVT_HEADER = struct.Struct("<4sIIQ")
_EVT_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "i1")])
_VXG_HEADER = struct.Struct("<4sIII")
_LBL_HEADER = struct.Struct("<4sIIB")
_MSK_HEADER = struct.Struct("<4sII")


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _header(buf: bytes, fmt: struct.Struct, magic: bytes, path):
    if len(buf) < fmt.size:
        raise FormatError(f"truncated header: need {fmt.size} bytes, got {len(buf)}", len(buf), path)
    fields = fmt.unpack_from(buf, 0)
    if fields[0] != magic:
        raise FormatError(f"bad magic {fields[0]!r}, expected {magic!r}", 0, path)
    return fields[1:]


# -- events --------------------------------------------------------------------


def encode_events(stream: EventStream) -> bytes:
    rec = np.empty(len(stream), _EVT_RECORD)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    return _EVT_HEADER.pack(EVT_MAGIC, stream.width, stream.height, len(stream)) + rec.tobytes()


def write_events(stream: EventStream, path) -> None:
    atomic_write(path, encode_events(stream))


def decode_events(buf: bytes, path=None) -> EventStream:
    w, h, n = _header(buf, _EVT_HEADER, EVT_MAGIC, path)
    start = _EVT_HEADER.size
    size = _EVT_RECORD.itemsize
    avail = (len(buf) - start) // size
    if avail < n:
        raise FormatError(f"truncated record {avail} of {n}", start + avail * size, path)
    if len(buf) != start + n * size:
        raise FormatError("trailing bytes after last record", start + n * size, path)
    rec = np.frombuffer(buf, _EVT_RECORD, count=n, offset=start)

    def first_bad(mask, what):
        i = int(np.argmax(mask))
        raise FormatError(f"record {i}: {what}", start + i * size, path)

    if n:
        if np.any(rec["x"] >= w):
            first_bad(rec["x"] >= w, f"x >= width {w}")
        if np.any(rec["y"] >= h):
            first_bad(rec["y"] >= h, f"y >= height {h}")
        if np.any(np.abs(rec["p"].astype(np.int16)) != 1):
            first_bad(np.abs(rec["p"].astype(np.int16)) != 1, "polarity not +-1")
        dt = np.diff(rec["t"])
        if np.any(dt < 0):
            i = int(np.argmax(dt < 0)) + 1
            raise FormatError(f"record {i}: timestamp decreases", start + i * size, path)
    return EventStream(w, h, rec["x"].copy(), rec["y"].copy(), rec["t"].copy(), rec["p"].copy())


def read_events(path) -> EventStream:
    return decode_events(_read(path), path)


# -- voxel grids -----------------------------------------------------------------


def encode_voxel(grid: VoxelGrid) -> bytes:
    t, h, w = grid.shape
    return _VXG_HEADER.pack(VXG_MAGIC, t, h, w) + grid.data.astype("<f4").tobytes()


def write_voxel(grid: VoxelGrid, path) -> None:
    atomic_write(path, encode_voxel(grid))


def read_voxel(path) -> VoxelGrid:
    buf = _read(path)
    t, h, w = _header(buf, _VXG_HEADER, VXG_MAGIC, path)
    start = _VXG_HEADER.size
    if min(t, h, w) == 0:
        raise FormatError(f"zero dimension in header {(t, h, w)}", 4, path)
    want = start + 4 * t * h * w
    if len(buf) != want:
        raise FormatError(
            f"payload size mismatch: header {(t, h, w)} needs {want} bytes, file has {len(buf)}",
            min(len(buf), want),
            path,
        )
    data = np.frombuffer(buf, "<f4", offset=start).reshape(t, h, w)
    if not np.all(np.isfinite(data)):
        i = int(np.argmax(~np.isfinite(data.ravel())))
        raise FormatError("non-finite voxel value", start + 4 * i, path)
    return VoxelGrid(data.astype(np.float32))


# -- labels ------------------------------------------------------------------------


def encode_labels(labels: LabelMap) -> bytes:
    h, w = labels.shape
    return _LBL_HEADER.pack(LBL_MAGIC, h, w, labels.num_classes) + labels.data.tobytes()


def write_labels(labels: LabelMap, path) -> None:
    atomic_write(path, encode_labels(labels))


def read_labels(path) -> LabelMap:
    buf = _read(path)
    h, w, c = _header(buf, _LBL_HEADER, LBL_MAGIC, path)
    start = _LBL_HEADER.size
    if len(buf) != start + h * w:
        raise FormatError(
            f"payload size mismatch: header {h}x{w} needs {h * w} bytes, file has {len(buf) - start}",
            min(len(buf), start + h * w),
            path,
        )
    data = np.frombuffer(buf, np.uint8, offset=start).reshape(h, w)
    bad = (data >= c) & (data != IGNORE)
    if bad.any():
        i = int(np.argmax(bad.ravel()))
        raise FormatError(f"label {int(data.ravel()[i])} >= num_classes {c}", start + i, path)
    return LabelMap(data.copy(), c)


# -- masks -------------------------------------------------------------------------


def encode_mask(mask: BlendMask) -> bytes:
    h, w = mask.shape
    return _MSK_HEADER.pack(MSK_MAGIC, h, w) + np.packbits(mask.bits, axis=1).tobytes()


def write_mask(mask: BlendMask, path) -> None:
    atomic_write(path, encode_mask(mask))


def read_mask(path) -> BlendMask:
    buf = _read(path)
    h, w = _header(buf, _MSK_HEADER, MSK_MAGIC, path)
    start = _MSK_HEADER.size
    row = (w + 7) // 8
    if len(buf) != start + h * row:
        raise FormatError(f"payload size mismatch for {h}x{w} mask", min(len(buf), start + h * row), path)
    packed = np.frombuffer(buf, np.uint8, offset=start).reshape(h, row)
    return BlendMask(np.unpackbits(packed, axis=1, count=w).astype(bool))


# -- PGM export ----------------------------------------------------------------------


def encode_pgm(values: np.ndarray) -> bytes:
    """Binary 8-bit PGM, scaled so the maximum maps to 255."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got {v.shape}")
    v = np.clip(np.nan_to_num(v, nan=0.0), 0.0, None)
    peak = v.max() if v.size else 0.0
    img = np.zeros(v.shape, np.uint8) if peak <= 0 else np.round(v / peak * 255).astype(np.uint8)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def write_pgm(values: np.ndarray, path) -> None:
    atomic_write(path, encode_pgm(values))


def read_pgm(path) -> np.ndarray:
    buf = _read(path)
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise FormatError("truncated PGM header", pos, path)
        tokens.append(buf[pos:end])
        pos = end
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P5":
        raise FormatError("not a binary PGM", 0, path)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", 0, path)
    if len(buf) - pos != w * h:
        raise FormatError("PGM payload size mismatch", pos, path)
    return np.frombuffer(buf, np.uint8, offset=pos).reshape(h, w).copy()
