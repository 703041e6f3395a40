"""Binary raster and event files, plus the key-value text blocks used for metadata.

Every binary file starts with the magic ``EVMG``, a version byte (1) and a
kind byte (``R`` raster, ``E`` events).  All integers are little-endian.

Raster header (20 bytes)::

    magic[4] version:u8 kind:u8 dtype:u8 reserved:u8 channels:u32 width:u32 height:u32

followed by a row-major ``channels x height x width`` payload: f32, u8, or
bits packed 8 per byte with every row padded to a whole byte.

Event header (16 bytes)::

    magic[4] version:u8 kind:u8 reserved:u16 count:u64

followed by ``count`` packed 13-byte records ``t:f64 x:u16 y:u16 p:i8``.
"""

from __future__ import annotations

import csv
import io
import math
import struct
from pathlib import Path

import numpy as np

from .events import EVENT_DTYPE, as_events

MAGIC = b"EVMG"
VERSION = 1
KIND_RASTER = ord("R")
KIND_EVENTS = ord("E")

_RASTER_HEADER = struct.Struct("<4sBBBBIII")
_EVENT_HEADER = struct.Struct("<4sBBHQ")

DTYPE_F32, DTYPE_U8, DTYPE_BOOL = 1, 2, 3
_TAGS = {DTYPE_F32: "f32", DTYPE_U8: "u8", DTYPE_BOOL: "bool"}
_TAG_BY_NAME = {v: k for k, v in _TAGS.items()}
_NUMPY = {DTYPE_F32: np.dtype("<f4"), DTYPE_U8: np.dtype("u1"), DTYPE_BOOL: np.dtype(bool)}

MAX_DIM = 1 << 16


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DtypeMismatchError(FormatError):
    pass


class CorruptHeaderError(FormatError):
    pass


class TrailingDataError(FormatError):
    pass


def _tag_for(arr: np.ndarray) -> int:
    if arr.dtype == np.bool_:
        return DTYPE_BOOL
    if arr.dtype == np.uint8:
        return DTYPE_U8
    if arr.dtype.kind == "f":
        return DTYPE_F32
    raise DtypeMismatchError(f"cannot store dtype {arr.dtype} in a raster")


def _row_bytes(tag: int, width: int) -> int:
    if tag == DTYPE_BOOL:
        return (width + 7) // 8
    return width * _NUMPY[tag].itemsize


def _as_chw(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise CorruptHeaderError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    return arr


def _encode_channels(arr: np.ndarray, tag: int) -> bytes:
    if tag == DTYPE_BOOL:
        return np.packbits(arr.astype(bool), axis=-1, bitorder="little").tobytes()
    return np.ascontiguousarray(arr, dtype=_NUMPY[tag]).tobytes()


class RasterWriter:
    """Write a raster channel by channel; the channel count is fixed up front."""

    def __init__(self, path, channels: int, height: int, width: int, dtype: str = "f32"):
        if dtype not in _TAG_BY_NAME:
            raise DtypeMismatchError(f"unknown raster dtype {dtype!r}")
        self.tag = _TAG_BY_NAME[dtype]
        self.channels, self.height, self.width = channels, height, width
        self.written = 0
        self._fh = open(path, "wb")
        self._fh.write(_RASTER_HEADER.pack(MAGIC, VERSION, KIND_RASTER, self.tag, 0, channels, width, height))

    def write(self, arr):
        arr = _as_chw(arr)
        if arr.shape[1:] != (self.height, self.width):
            raise CorruptHeaderError(f"channel shape {arr.shape[1:]} != {(self.height, self.width)}")
        if self.written + arr.shape[0] > self.channels:
            raise CorruptHeaderError("more channels than declared")
        self._fh.write(_encode_channels(arr, self.tag))
        self.written += arr.shape[0]

    def close(self):
        self._fh.close()
        if self.written != self.channels:
            raise CorruptHeaderError(f"declared {self.channels} channels, wrote {self.written}")

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def write_raster(arr, path, dtype: str | None = None):
    """Write a ``(C, H, W)`` or ``(H, W)`` array; the dtype follows the array unless given."""
    arr = _as_chw(arr)
    tag = _TAG_BY_NAME[dtype] if dtype else _tag_for(arr)
    with RasterWriter(path, arr.shape[0], arr.shape[1], arr.shape[2], _TAGS[tag]) as w:
        w.write(arr)


def _parse_raster_header(head: bytes):
    if len(head) < 4 or head[:4] != MAGIC:
        raise BadMagicError("not an EVMG file")
    if len(head) < _RASTER_HEADER.size:
        raise TruncatedPayloadError("raster header is truncated")
    _, version, kind, tag, _, channels, width, height = _RASTER_HEADER.unpack(head[: _RASTER_HEADER.size])
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} is not supported")
    if kind != KIND_RASTER:
        raise CorruptHeaderError(f"file kind {chr(kind)!r} is not a raster")
    if tag not in _TAGS:
        raise DtypeMismatchError(f"unknown dtype tag {tag}")
    if not (0 < width <= MAX_DIM and 0 < height <= MAX_DIM and channels <= MAX_DIM):
        raise CorruptHeaderError(f"implausible raster size {channels}x{height}x{width}")
    return tag, channels, height, width


class RasterReader:
    """Random access to the channels of a raster file without loading it whole."""

    def __init__(self, path, expect_dtype: str | None = None):
        self._fh = open(path, "rb")
        try:
            self.tag, self.channels, self.height, self.width = _parse_raster_header(
                self._fh.read(_RASTER_HEADER.size)
            )
            if expect_dtype is not None and _TAGS[self.tag] != expect_dtype:
                raise DtypeMismatchError(f"expected {expect_dtype} raster, found {_TAGS[self.tag]}")
            self._chan_bytes = self.height * _row_bytes(self.tag, self.width)
            self._fh.seek(0, io.SEEK_END)
            size = self._fh.tell() - _RASTER_HEADER.size
            expected = self.channels * self._chan_bytes
            if size < expected:
                raise TruncatedPayloadError(f"payload has {size} bytes, header implies {expected}")
            if size > expected:
                raise TrailingDataError(f"{size - expected} unexpected bytes after payload")
        except BaseException:
            self._fh.close()
            raise

    @property
    def dtype(self) -> str:
        return _TAGS[self.tag]

    def read(self, start: int = 0, count: int | None = None) -> np.ndarray:
        if count is None:
            count = self.channels - start
        if start < 0 or count < 0 or start + count > self.channels:
            raise IndexError(f"channels [{start}, {start + count}) outside 0..{self.channels}")
        self._fh.seek(_RASTER_HEADER.size + start * self._chan_bytes)
        buf = self._fh.read(count * self._chan_bytes)
        if len(buf) != count * self._chan_bytes:
            raise TruncatedPayloadError("payload shrank while reading")
        if self.tag == DTYPE_BOOL:
            rows = np.frombuffer(buf, dtype=np.uint8).reshape(count, self.height, _row_bytes(self.tag, self.width))
            return np.unpackbits(rows, axis=-1, count=self.width, bitorder="little").astype(bool)
        return np.frombuffer(buf, dtype=_NUMPY[self.tag]).reshape(count, self.height, self.width).copy()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_raster(path, expect_dtype: str | None = None) -> np.ndarray:
    """Read a whole raster as a ``(C, H, W)`` array (float32, uint8 or bool)."""
    with RasterReader(path, expect_dtype) as r:
        return r.read()


def decode_raster(data: bytes, expect_dtype: str | None = None) -> np.ndarray:
    """In-memory counterpart of :func:`read_raster`."""
    tag, channels, height, width = _parse_raster_header(data[: _RASTER_HEADER.size])
    if expect_dtype is not None and _TAGS[tag] != expect_dtype:
        raise DtypeMismatchError(f"expected {expect_dtype} raster, found {_TAGS[tag]}")
    payload = data[_RASTER_HEADER.size :]
    expected = channels * height * _row_bytes(tag, width)
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise TrailingDataError(f"{len(payload) - expected} unexpected bytes after payload")
    if tag == DTYPE_BOOL:
        rows = np.frombuffer(payload, dtype=np.uint8).reshape(channels, height, _row_bytes(tag, width))
        return np.unpackbits(rows, axis=-1, count=width, bitorder="little").astype(bool)
    return np.frombuffer(payload, dtype=_NUMPY[tag]).reshape(channels, height, width).copy()


# -- events -------------------------------------------------------------------


def encode_events(events) -> bytes:
    ev = as_events(events)
    return _EVENT_HEADER.pack(MAGIC, VERSION, KIND_EVENTS, 0, ev.size) + ev.tobytes()


def write_events(events, path):
    Path(path).write_bytes(encode_events(events))


def write_events_csv(events, path):
    ev = as_events(events)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y", "p"])
        for t, x, y, p in ev.tolist():
            w.writerow([repr(float(t)), x, y, p])


def _check_polarity(ev):
    if ev.size and not np.all((ev["p"] == 1) | (ev["p"] == -1)):
        raise FormatError("event polarity must be -1 or +1")


def decode_events(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise BadMagicError("not an EVMG event file")
    if len(data) < _EVENT_HEADER.size:
        raise TruncatedPayloadError("event header is truncated")
    _, version, kind, _, count = _EVENT_HEADER.unpack(data[: _EVENT_HEADER.size])
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} is not supported")
    if kind != KIND_EVENTS:
        raise CorruptHeaderError(f"file kind {chr(kind)!r} is not an event file")
    payload = data[_EVENT_HEADER.size :]
    expected = count * EVENT_DTYPE.itemsize
    if len(payload) < expected:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise TrailingDataError(f"{len(payload) - expected} unexpected bytes after events")
    ev = np.frombuffer(payload, dtype=EVENT_DTYPE).copy()
    if not np.all(np.isfinite(ev["t"])):
        raise FormatError("non-finite event timestamp")
    _check_polarity(ev)
    return ev


def parse_events_csv(text: str) -> np.ndarray:
    try:
        rows = list(csv.reader(io.StringIO(text)))
    except csv.Error as exc:
        raise FormatError(f"unreadable event CSV: {exc}") from None
    if not rows or [c.strip() for c in rows[0]] != ["t", "x", "y", "p"]:
        raise FormatError("event CSV must start with the header t,x,y,p")
    t, x, y, p = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise FormatError(f"line {lineno}: expected 4 fields, got {len(row)}")
        try:
            tt, xx, yy, pp = float(row[0]), int(row[1]), int(row[2]), int(row[3])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        if not math.isfinite(tt) or not (0 <= xx < MAX_DIM and 0 <= yy < MAX_DIM) or pp not in (-1, 1):
            raise FormatError(f"line {lineno}: field out of range")
        t.append(tt), x.append(xx), y.append(yy), p.append(pp)
    ev = np.empty(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t, x, y, p
    return ev


def read_events(path) -> np.ndarray:
    """Read a binary event file, or the ``t,x,y,p`` CSV fallback."""
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        return decode_events(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise BadMagicError("neither an EVMG event file nor UTF-8 CSV") from None
    return parse_events_csv(text)


# -- key-value text blocks ----------------------------------------------------


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise TypeError(f"cannot format {type(v).__name__}")


def dump_kv(data: dict) -> str:
    """Serialise a dict as TOML: scalars first, sub-dicts as tables, lists of dicts as arrays of tables."""
    lines, tables, arrays = [], [], []
    for k, v in data.items():
        if isinstance(v, dict):
            tables.append((k, v))
        elif isinstance(v, list) and v and all(isinstance(x, dict) for x in v):
            arrays.append((k, v))
        else:
            lines.append(f"{k} = {_fmt_value(v)}")
    for k, v in tables:
        lines += ["", f"[{k}]"] + [f"{kk} = {_fmt_value(vv)}" for kk, vv in v.items()]
    for k, items in arrays:
        for item in items:
            lines += ["", f"[[{k}]]"] + [f"{kk} = {_fmt_value(vv)}" for kk, vv in item.items()]
    return "\n".join(lines) + "\n"
