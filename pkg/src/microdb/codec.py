"""Canonical binary serialization.

One byte layout is shared by the store log, the sync wire protocol,
token payloads and ``content_hash``. All integers are big-endian fixed
width; strings and byte strings are prefixed with a u32 length.

Value encoding (1 tag byte, then body)::

    0x00 null (tombstone only)
    0x01 bool     u8
    0x02 int      i64
    0x03 float    f64 (IEEE 754)
    0x04 str      u32 len + UTF-8
    0x05 bytes    u32 len + raw
    0x06 object   u32 field count, then (str name, value) per field

Record encoding::

    u8 op | i64 ts | u64 seq | str origin_id | u64 origin_seq | i64 write_ts | value
"""

from __future__ import annotations

import math
import struct
from typing import Any

from .errors import DecodeError
from .records import INT64_MAX, INT64_MIN, Op, Provenance, Record, RecordKey

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")
_RECORD_HEAD = struct.Struct(">BqQ")  # op, ts, seq

T_NULL, T_BOOL, T_INT, T_FLOAT, T_STR, T_BYTES, T_OBJECT = range(7)


class Writer:
    __slots__ = ("parts",)

    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v: int) -> "Writer":
        self.parts.append(_U8.pack(v))
        return self

    def u32(self, v: int) -> "Writer":
        self.parts.append(_U32.pack(v))
        return self

    def u64(self, v: int) -> "Writer":
        self.parts.append(_U64.pack(v))
        return self

    def i64(self, v: int) -> "Writer":
        self.parts.append(_I64.pack(v))
        return self

    def str(self, v: str) -> "Writer":
        raw = v.encode("utf-8")
        self.parts.append(_U32.pack(len(raw)))
        self.parts.append(raw)
        return self

    def bytes(self, v: bytes) -> "Writer":
        self.parts.append(_U32.pack(len(v)))
        self.parts.append(bytes(v))
        return self

    def raw(self, v: bytes) -> "Writer":
        self.parts.append(v)
        return self

    def value(self, v: Any) -> "Writer":
        _write_value(self, v)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = memoryview(buf)
        self.pos = pos

    def _take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise DecodeError(f"truncated input: need {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def str(self) -> str:
        n = self.u32()
        try:
            return str(self._take(n), "utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8: {exc}") from None

    def bytes(self) -> bytes:
        return bytes(self._take(self.u32()))

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def value(self) -> Any:
        return _read_value(self)

    @property
    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def expect_end(self) -> None:
        if self.remaining:
            raise DecodeError(f"{self.remaining} trailing bytes")


def _write_value(w: Writer, v: Any) -> None:
    # bool before int: bool is an int subclass
    if v is None:
        w.u8(T_NULL)
    elif isinstance(v, bool):
        w.u8(T_BOOL).u8(1 if v else 0)
    elif isinstance(v, int):
        if not INT64_MIN <= v <= INT64_MAX:
            raise ValueError(f"integer {v} outside signed 64-bit range")
        w.u8(T_INT).i64(v)
    elif isinstance(v, float):
        w.u8(T_FLOAT).raw(_F64.pack(v))
    elif isinstance(v, str):
        w.u8(T_STR).str(v)
    elif isinstance(v, (bytes, bytearray)):
        w.u8(T_BYTES).bytes(bytes(v))
    elif isinstance(v, dict):
        w.u8(T_OBJECT).u32(len(v))
        for name, field in v.items():
            if not isinstance(name, str):
                raise ValueError(f"object field names must be strings, got {name!r}")
            w.str(name)
            _write_value(w, field)
    else:
        raise ValueError(f"unsupported value type {type(v).__name__}")


def _read_value(r: Reader) -> Any:
    tag = r.u8()
    if tag == T_NULL:
        return None
    if tag == T_BOOL:
        return r.u8() != 0
    if tag == T_INT:
        return r.i64()
    if tag == T_FLOAT:
        return _F64.unpack(r._take(8))[0]
    if tag == T_STR:
        return r.str()
    if tag == T_BYTES:
        return r.bytes()
    if tag == T_OBJECT:
        n = r.u32()
        obj = {}
        for _ in range(n):
            name = r.str()
            if name in obj:
                raise DecodeError(f"duplicate object field {name!r}")
            obj[name] = _read_value(r)
        return obj
    raise DecodeError(f"unknown value tag 0x{tag:02x}")


def check_value(v: Any) -> None:
    """Raise ValueError if ``v`` is not representable as a stored Value."""
    _write_value(Writer(), v)


def encode_value(v: Any) -> bytes:
    return Writer().value(v).getvalue()


def write_record(w: Writer, rec: Record) -> None:
    if rec.key.seq < 0:
        raise ValueError("negative seq")
    w.raw(_RECORD_HEAD.pack(rec.op, rec.key.ts, rec.key.seq))
    w.str(rec.prov.origin_id).u64(rec.prov.origin_seq).i64(rec.prov.write_ts)
    _write_value(w, rec.value)


def encode_record(rec: Record) -> bytes:
    w = Writer()
    write_record(w, rec)
    return w.getvalue()


def read_record(r: Reader) -> Record:
    op = r.u8()
    try:
        op = Op(op)
    except ValueError:
        raise DecodeError(f"unknown record op {op}") from None
    ts = r.i64()
    seq = r.u64()
    origin_id = r.str()
    origin_seq = r.u64()
    write_ts = r.i64()
    value = _read_value(r)
    return Record(RecordKey(ts, seq), value, Provenance(origin_id, origin_seq, write_ts), op)


def decode_record(buf: bytes) -> Record:
    r = Reader(buf)
    rec = read_record(r)
    r.expect_end()
    return rec


def values_equal(a: Any, b: Any) -> bool:
    """Value equality with NaN == NaN and no bool/int aliasing."""
    if type(a) is not type(b):
        return False
    if isinstance(a, float) and math.isnan(a) and math.isnan(b):
        return True
    if isinstance(a, dict):
        return list(a) == list(b) and all(values_equal(a[k], b[k]) for k in a)
    return a == b
