"""
Datagram framing for the UDP phase and the preface that attaches a TCP
stream to it.

Fragment header layout (22 bytes, big-endian)::

    version:u8 | frag_type:u8 | conn_id:12 | total_len:u32 | offset:u32

TCP preface layout (17 bytes)::

    b"TTLS" | version:u8 | conn_id:12
"""

import os
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Tuple, Union

VERSION = 1
CONN_ID_SIZE = 12
HEADER_SIZE = 22
PREFACE_MAGIC = b"TTLS"
PREFACE_SIZE = 17
MAX_UINT32 = 0xFFFFFFFF

_HEADER = struct.Struct("!BB12sII")
_PREFACE = struct.Struct("!4sB12s")

assert _HEADER.size == HEADER_SIZE
assert _PREFACE.size == PREFACE_SIZE


class FragType(IntEnum):
    CH_FRAG = 1
    PAD_REQ = 2
    RESP_FRAG = 3


class WireError(ValueError):
    pass


class InvalidHeader(WireError):
    pass


class TooShort(WireError):
    pass


class UnknownVersion(WireError):
    pass


class UnknownType(WireError):
    pass


class BoundsViolation(WireError):
    pass


class MalformedPreface(WireError):
    pass


def new_conn_id() -> bytes:
    return os.urandom(CONN_ID_SIZE)


@dataclass(frozen=True)
class FragmentHeader:
    frag_type: FragType
    conn_id: bytes
    total_len: int
    offset: int
    version: int = VERSION

    def validate(self, payload_len: int) -> None:
        if self.version != VERSION:
            raise InvalidHeader(f"unsupported version {self.version}")
        if len(self.conn_id) != CONN_ID_SIZE:
            raise InvalidHeader("connection id must be 12 bytes")
        if not (0 <= self.total_len <= MAX_UINT32 and 0 <= self.offset <= MAX_UINT32):
            raise InvalidHeader("length fields must fit in 32 bits")
        if self.frag_type == FragType.PAD_REQ:
            if self.total_len != 0 or payload_len:
                raise InvalidHeader("pad request must be empty with total_len 0")
        elif self.offset >= self.total_len or self.offset + payload_len > self.total_len:
            raise InvalidHeader(
                f"fragment [{self.offset}, {self.offset + payload_len}) "
                f"outside message of {self.total_len} bytes"
            )


def encode_fragment(header: FragmentHeader, payload: bytes = b"") -> bytes:
    header.validate(len(payload))
    return (
        _HEADER.pack(
            header.version,
            int(header.frag_type),
            header.conn_id,
            header.total_len,
            header.offset,
        )
        + payload
    )


def decode_fragment(datagram: bytes) -> Tuple[FragmentHeader, bytes]:
    """
    Parse a datagram into its header and payload.

    Never raises anything but a :class:`WireError` subclass, whatever the input.
    """
    if len(datagram) < HEADER_SIZE:
        raise TooShort(f"{len(datagram)} bytes is shorter than the header")
    version, frag_type, conn_id, total_len, offset = _HEADER.unpack_from(datagram)
    if version != VERSION:
        raise UnknownVersion(f"version {version}")
    try:
        ftype = FragType(frag_type)
    except ValueError:
        raise UnknownType(f"fragment type {frag_type}") from None
    payload = bytes(datagram[HEADER_SIZE:])
    header = FragmentHeader(ftype, conn_id, total_len, offset, version)
    if ftype == FragType.PAD_REQ:
        if total_len != 0 or payload:
            raise BoundsViolation("pad request carries data")
    elif offset >= total_len or offset + len(payload) > total_len:
        raise BoundsViolation(
            f"offset {offset} + {len(payload)} exceeds total length {total_len}"
        )
    return header, payload


@dataclass(frozen=True)
class TurboAttach:
    conn_id: bytes
    consumed: int = PREFACE_SIZE


@dataclass(frozen=True)
class VanillaTls:
    consumed: int = 0


def encode_tcp_preface(conn_id: bytes) -> bytes:
    if len(conn_id) != CONN_ID_SIZE:
        raise InvalidHeader("connection id must be 12 bytes")
    return _PREFACE.pack(PREFACE_MAGIC, VERSION, conn_id)


def decode_tcp_preface(prefix: bytes) -> Union[TurboAttach, VanillaTls]:
    """
    Classify the start of an accepted TCP stream.

    A TLS record starts with 0x16, never with the preface's 0x54, so one byte
    is enough to tell a vanilla client apart.
    """
    if not prefix:
        raise MalformedPreface("empty stream prefix")
    if prefix[0] != PREFACE_MAGIC[0]:
        return VanillaTls()
    if len(prefix) < PREFACE_SIZE:
        raise MalformedPreface(f"need {PREFACE_SIZE} bytes, got {len(prefix)}")
    magic, version, conn_id = _PREFACE.unpack_from(prefix)
    if magic != PREFACE_MAGIC:
        raise MalformedPreface(f"bad magic {magic!r}")
    if version != VERSION:
        raise MalformedPreface(f"unknown preface version {version}")
    return TurboAttach(conn_id)
