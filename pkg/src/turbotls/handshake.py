"""
Handshake engines.

TurboTLS only changes how handshake flights travel, never what they contain,
so the transport layer treats each flight as an opaque byte string produced
and consumed by a :class:`HandshakeEngine`. The mock engine stands in for a
real TLS stack: it emits flights of configurable size whose integrity and
transcript binding can be checked.

Every flight is self-delimiting::

    body_len:u32 | crc32(body):u32 | body
"""

import abc
import hashlib
import random
import struct
import zlib
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

FLIGHT_HEADER_SIZE = 8
_DIGEST_SIZE = 32
_MIN_FLIGHT = FLIGHT_HEADER_SIZE + 1 + _DIGEST_SIZE

_KIND_HELLO = b"C"
_KIND_RESPONSE = b"S"
_KIND_FINISH = b"F"


class Verdict(Enum):
    ACCEPT = "accept"
    REJECT = "reject"


class HandshakeError(Exception):
    """A flight failed its integrity or transcript check."""


class HandshakeEngine(abc.ABC):
    @abc.abstractmethod
    def client_first_flight(self) -> bytes: ...

    @abc.abstractmethod
    def server_response(self, client_flight: bytes) -> bytes: ...

    @abc.abstractmethod
    def client_finish(self, server_response: bytes) -> bytes: ...

    @abc.abstractmethod
    def server_verify_finish(self, finish_flight: bytes) -> Verdict: ...

    @abc.abstractmethod
    def response_size_bound(self) -> int: ...


@dataclass(frozen=True)
class MockSuite:
    name: str
    ch_len: int
    response_len: int
    finish_len: int
    # server-side time to produce the response flight, seconds
    compute: float = 0.0

    def __post_init__(self) -> None:
        for field_name in ("ch_len", "response_len", "finish_len"):
            if getattr(self, field_name) < _MIN_FLIGHT:
                raise ValueError(f"{field_name} must be at least {_MIN_FLIGHT} bytes")
        if self.compute < 0:
            raise ValueError("compute time must be non-negative")

    def with_compute(self, compute: float) -> "MockSuite":
        return replace(self, compute=compute)


# Byte counts approximate ECDSA/ECDH P-256 and Dilithium2/Kyber-512 handshakes
# with a single self-signed certificate.
EC_SUITE = MockSuite("EC", ch_len=300, response_len=1100, finish_len=80)
PQ_SUITE = MockSuite("PQ", ch_len=1900, response_len=4300, finish_len=80)

SUITES = {"ec": EC_SUITE, "pq": PQ_SUITE}


def get_suite(name: str) -> MockSuite:
    try:
        return SUITES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}") from None


def _digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def _seal(kind: bytes, bound: bytes, total_len: int, rng: random.Random) -> bytes:
    body = kind + bound
    body += rng.randbytes(total_len - FLIGHT_HEADER_SIZE - len(body))
    return struct.pack("!II", len(body), zlib.crc32(body)) + body


def _open(flight: bytes, kind: bytes) -> bytes:
    if len(flight) < _MIN_FLIGHT:
        raise HandshakeError("flight too short")
    body_len, crc = struct.unpack_from("!II", flight)
    body = flight[FLIGHT_HEADER_SIZE:]
    if body_len != len(body):
        raise HandshakeError("flight length mismatch")
    if zlib.crc32(body) != crc:
        raise HandshakeError("flight checksum mismatch")
    if body[:1] != kind:
        raise HandshakeError(f"expected flight kind {kind!r}, got {body[:1]!r}")
    return body[1 : 1 + _DIGEST_SIZE]


def split_flight(stream: bytes) -> Optional[Tuple[bytes, bytes]]:
    """Cut one complete flight off the front of a stream, if fully buffered."""
    if len(stream) < FLIGHT_HEADER_SIZE:
        return None
    (body_len,) = struct.unpack_from("!I", stream)
    end = FLIGHT_HEADER_SIZE + body_len
    if len(stream) < end:
        return None
    return bytes(stream[:end]), bytes(stream[end:])


class MockEngine(HandshakeEngine):
    """
    Single-session mock handshake.

    A client instance and a server instance built from the same suite
    interoperate; the seed only affects filler bytes.
    """

    def __init__(self, suite: MockSuite, seed: int = 0) -> None:
        self.suite = suite
        self._rng = random.Random(seed)
        self._hello: Optional[bytes] = None
        self._response: Optional[bytes] = None
        self.calls = {"server_response": 0, "server_verify_finish": 0}

    def client_first_flight(self) -> bytes:
        if self._hello is None:
            self._hello = _seal(_KIND_HELLO, b"", self.suite.ch_len, self._rng)
        return self._hello

    def server_response(self, client_flight: bytes) -> bytes:
        self.calls["server_response"] += 1
        _open(client_flight, _KIND_HELLO)
        self._response = _seal(
            _KIND_RESPONSE, _digest(client_flight), self.suite.response_len, self._rng
        )
        return self._response

    def client_finish(self, server_response: bytes) -> bytes:
        bound = _open(server_response, _KIND_RESPONSE)
        if self._hello is None or bound != _digest(self._hello):
            raise HandshakeError("server response not bound to our ClientHello")
        return _seal(
            _KIND_FINISH, _digest(server_response), self.suite.finish_len, self._rng
        )

    def server_verify_finish(self, finish_flight: bytes) -> Verdict:
        self.calls["server_verify_finish"] += 1
        try:
            bound = _open(finish_flight, _KIND_FINISH)
        except HandshakeError:
            return Verdict.REJECT
        if self._response is None or bound != _digest(self._response):
            return Verdict.REJECT
        return Verdict.ACCEPT

    def response_size_bound(self) -> int:
        return self.suite.response_len


def mock_engine(suite: MockSuite, seed: int = 0) -> MockEngine:
    return MockEngine(suite, seed)
