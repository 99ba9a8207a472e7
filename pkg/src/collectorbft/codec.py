"""Canonical length-prefixed little-endian binary encoding.

Structures declare ``FIELDS`` as (name, codec) pairs; encoding is the
concatenation of the field encodings in declaration order. Decoding is
strict: trailing bytes, out-of-range flags and unknown tags are errors,
which makes the encoding canonical (one byte string per value).
"""

from __future__ import annotations

import struct

from .crypto import (
    BLS_SIZE,
    DIGEST_SIZE,
    SCHEME_CODES,
    SCHEME_NAMES,
    CombinedSig,
    SigShare,
)

MAX_LEN = 1 << 24


class MalformedMessage(ValueError):
    pass


class Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, k: int) -> bytes:
        end = self.pos + k
        if k < 0 or end > len(self.data):
            raise MalformedMessage("truncated input")
        out = self.data[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: struct.Struct):
        end = self.pos + fmt.size
        if end > len(self.data):
            raise MalformedMessage("truncated input")
        out = fmt.unpack_from(self.data, self.pos)
        self.pos = end
        return out


class Codec:
    def enc(self, out: list, value) -> None:
        raise NotImplementedError

    def dec(self, r: Reader):
        raise NotImplementedError

    def size(self, value) -> int:
        """Accounted wire size, charging combined signatures at BLS size."""
        out: list = []
        self.enc(out, value)
        return sum(len(b) for b in out)


class _Int(Codec):
    def __init__(self, fmt: str, lo: int, hi: int):
        self.st = struct.Struct("<" + fmt)
        self.lo, self.hi = lo, hi

    def enc(self, out, value):
        if not isinstance(value, int) or not self.lo <= value <= self.hi:
            raise MalformedMessage(f"integer {value!r} out of range")
        out.append(self.st.pack(value))

    def dec(self, r):
        return r.unpack(self.st)[0]

    def size(self, value):
        return self.st.size


class _Flag(_Int):
    def dec(self, r):
        v = r.unpack(self.st)[0]
        if v > 1:
            raise MalformedMessage("flag byte must be 0 or 1")
        return v


U8 = _Int("B", 0, 0xFF)
U32 = _Int("I", 0, 0xFFFFFFFF)
U64 = _Int("Q", 0, (1 << 64) - 1)
I64 = _Int("q", -(1 << 63), (1 << 63) - 1)
FLAG = _Flag("B", 0, 1)
_LEN = struct.Struct("<I")


class _Bytes(Codec):
    def enc(self, out, value):
        if not isinstance(value, (bytes, bytearray)):
            raise MalformedMessage("expected bytes")
        out.append(_LEN.pack(len(value)))
        out.append(bytes(value))

    def dec(self, r):
        (k,) = r.unpack(_LEN)
        if k > MAX_LEN:
            raise MalformedMessage("length prefix too large")
        return r.take(k)

    def size(self, value):
        return 4 + len(value)


class _Fixed(Codec):
    def __init__(self, k: int):
        self.k = k

    def enc(self, out, value):
        if not isinstance(value, bytes) or len(value) != self.k:
            raise MalformedMessage(f"expected {self.k} bytes")
        out.append(value)

    def dec(self, r):
        return r.take(self.k)

    def size(self, value):
        return self.k


BYTES = _Bytes()
DIGEST = _Fixed(DIGEST_SIZE)


class List(Codec):
    def __init__(self, item: Codec):
        self.item = item

    def enc(self, out, value):
        out.append(_LEN.pack(len(value)))
        for v in value:
            self.item.enc(out, v)

    def dec(self, r):
        (k,) = r.unpack(_LEN)
        if k > MAX_LEN:
            raise MalformedMessage("list too long")
        return tuple(self.item.dec(r) for _ in range(k))

    def size(self, value):
        return 4 + sum(self.item.size(v) for v in value)


class Opt(Codec):
    def __init__(self, item: Codec):
        self.item = item

    def enc(self, out, value):
        if value is None:
            out.append(b"\x00")
        else:
            out.append(b"\x01")
            self.item.enc(out, value)

    def dec(self, r):
        if FLAG.dec(r):
            return self.item.dec(r)
        return None

    def size(self, value):
        return 1 if value is None else 1 + self.item.size(value)


class Struct(Codec):
    """Codec for a class declaring FIELDS; the class is built by keyword."""

    def __init__(self, cls):
        self.cls = cls

    def enc(self, out, value):
        if type(value) is not self.cls:
            raise MalformedMessage(f"expected {self.cls.__name__}, got {type(value).__name__}")
        for name, codec in self.cls.FIELDS:
            codec.enc(out, getattr(value, name))

    def dec(self, r):
        kw = {name: codec.dec(r) for name, codec in self.cls.FIELDS}
        try:
            return self.cls(**kw)
        except (TypeError, ValueError) as exc:
            raise MalformedMessage(str(exc)) from exc

    def size(self, value):
        return sum(codec.size(getattr(value, name)) for name, codec in self.cls.FIELDS)


class Union(Codec):
    """One-byte tag followed by the variant's Struct encoding."""

    def __init__(self, variants: dict[int, type]):
        self.by_tag = {t: Struct(c) for t, c in variants.items()}
        self.by_cls = {c: (t, Struct(c)) for t, c in variants.items()}

    def enc(self, out, value):
        hit = self.by_cls.get(type(value))
        if hit is None:
            raise MalformedMessage(f"no union variant for {type(value).__name__}")
        out.append(bytes([hit[0]]))
        hit[1].enc(out, value)

    def dec(self, r):
        (tag,) = r.unpack(U8.st)
        codec = self.by_tag.get(tag)
        if codec is None:
            raise MalformedMessage(f"unknown variant tag {tag}")
        return codec.dec(r)

    def size(self, value):
        return 1 + self.by_cls[type(value)][1].size(value)


class _Share(Codec):
    def enc(self, out, s):
        if type(s) is not SigShare or s.scheme_tag not in SCHEME_CODES:
            raise MalformedMessage("expected SigShare")
        U8.enc(out, SCHEME_CODES[s.scheme_tag])
        U32.enc(out, s.signer)
        DIGEST.enc(out, s.digest)
        BYTES.enc(out, s.tag)

    def dec(self, r):
        code = U8.dec(r)
        if code not in SCHEME_NAMES:
            raise MalformedMessage(f"unknown scheme code {code}")
        return SigShare(SCHEME_NAMES[code], U32.dec(r), DIGEST.dec(r), BYTES.dec(r))

    def size(self, s):
        return 1 + 4 + DIGEST_SIZE + 4 + len(s.tag)


class _Combined(Codec):
    def enc(self, out, s):
        if type(s) is not CombinedSig or s.scheme_tag not in SCHEME_CODES:
            raise MalformedMessage("expected CombinedSig")
        U8.enc(out, SCHEME_CODES[s.scheme_tag])
        DIGEST.enc(out, s.digest)
        BYTES.enc(out, s.evidence)

    def dec(self, r):
        code = U8.dec(r)
        if code not in SCHEME_NAMES:
            raise MalformedMessage(f"unknown scheme code {code}")
        return CombinedSig(SCHEME_NAMES[code], DIGEST.dec(r), BYTES.dec(r))

    def size(self, s):
        # digest travels with the message; the signature itself is BLS-sized
        return 1 + DIGEST_SIZE + BLS_SIZE


SHARE = _Share()
COMBINED = _Combined()


def encode_value(codec: Codec, value) -> bytes:
    out: list = []
    codec.enc(out, value)
    return b"".join(out)


def decode_value(codec: Codec, data: bytes):
    if not isinstance(data, (bytes, bytearray)):
        raise MalformedMessage("expected bytes")
    r = Reader(bytes(data))
    try:
        value = codec.dec(r)
    except MalformedMessage:
        raise
    except (struct.error, ValueError, TypeError, KeyError, RecursionError) as exc:
        raise MalformedMessage(str(exc)) from exc
    if r.pos != len(r.data):
        raise MalformedMessage("trailing bytes")
    return value
