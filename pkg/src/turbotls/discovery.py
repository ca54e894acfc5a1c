"""
TurboTLS advertisement in DNS HTTPS (SVCB-form) resource records.

Support is a valueless SvcParam under a private-use key. Only the RDATA codec
lives here; fetching records is left to whatever resolver the caller uses.

RDATA layout::

    SvcPriority:u16 | TargetName (uncompressed labels) | { key:u16 len:u16 value }*
"""

import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

TURBOTLS_KEY = 65280

_MAX_LABEL = 63
_MAX_NAME = 255


class DiscoveryError(ValueError):
    pass


class Malformed(DiscoveryError):
    pass


class UnsortedParams(DiscoveryError):
    pass


class Truncated(DiscoveryError):
    pass


def _canonical_name(name: str) -> str:
    if name in ("", "."):
        return "."
    return name if name.endswith(".") else name + "."


@dataclass(frozen=True)
class HttpsRecord:
    priority: int
    target_name: str = "."
    svc_params: Tuple[Tuple[int, bytes], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_name", _canonical_name(self.target_name))
        object.__setattr__(
            self, "svc_params", tuple((int(k), bytes(v)) for k, v in self.svc_params)
        )

    @classmethod
    def advertising(cls, priority: int = 1, target_name: str = ".") -> "HttpsRecord":
        return cls(priority, target_name, ((TURBOTLS_KEY, b""),))


def _encode_name(name: str) -> bytes:
    if name == ".":
        return b"\x00"
    out = bytearray()
    for label in name.rstrip(".").split("."):
        try:
            raw = label.encode("ascii")
        except UnicodeEncodeError:
            raise Malformed(f"non-ASCII label {label!r}") from None
        if not 0 < len(raw) <= _MAX_LABEL:
            raise Malformed(f"bad label length in {name!r}")
        if any(b > 0x7E or b < 0x21 for b in raw):
            raise Malformed(f"label {label!r} contains unsupported bytes")
        out += bytes([len(raw)]) + raw
    out += b"\x00"
    if len(out) > _MAX_NAME:
        raise Malformed(f"name {name!r} too long")
    return bytes(out)


def _decode_name(data: bytes, pos: int) -> Tuple[str, int]:
    labels: List[str] = []
    start = pos
    while True:
        if pos >= len(data):
            raise Truncated("target name runs past end of RDATA")
        length = data[pos]
        pos += 1
        if length == 0:
            break
        if length > _MAX_LABEL:
            raise Malformed("compressed or oversized label in target name")
        if pos + length > len(data):
            raise Truncated("label runs past end of RDATA")
        raw = data[pos : pos + length]
        if b"." in raw or any(b > 0x7E or b < 0x21 for b in raw):
            raise Malformed("label contains unsupported bytes")
        labels.append(raw.decode("ascii"))
        pos += length
        if pos - start > _MAX_NAME:
            raise Malformed("target name too long")
    return (".".join(labels) + ".") if labels else ".", pos


def _check_order(keys: List[int]) -> None:
    for prev, key in zip(keys, keys[1:]):
        if key <= prev:
            raise UnsortedParams(f"SvcParamKey {key} follows {prev}")


def encode_https_rdata(record: HttpsRecord) -> bytes:
    if not 0 <= record.priority <= 0xFFFF:
        raise Malformed("priority must fit in 16 bits")
    _check_order([k for k, _ in record.svc_params])
    out = bytearray(struct.pack("!H", record.priority))
    out += _encode_name(record.target_name)
    for key, value in record.svc_params:
        if not 0 <= key <= 0xFFFF or len(value) > 0xFFFF:
            raise Malformed(f"parameter {key} out of range")
        out += struct.pack("!HH", key, len(value)) + value
    return bytes(out)


def decode_https_rdata(data: bytes) -> HttpsRecord:
    if len(data) < 2:
        raise Truncated("RDATA shorter than SvcPriority")
    (priority,) = struct.unpack_from("!H", data)
    target, pos = _decode_name(data, 2)
    params: List[Tuple[int, bytes]] = []
    while pos < len(data):
        if pos + 4 > len(data):
            raise Truncated("SvcParam header cut short")
        key, length = struct.unpack_from("!HH", data, pos)
        pos += 4
        if pos + length > len(data):
            raise Truncated(f"SvcParam {key} value cut short")
        if params and key <= params[-1][0]:
            raise UnsortedParams(f"SvcParamKey {key} follows {params[-1][0]}")
        params.append((key, bytes(data[pos : pos + length])))
        pos += length
    return HttpsRecord(priority, target, tuple(params))


def supports_turbotls(record: HttpsRecord, key: int = TURBOTLS_KEY) -> bool:
    # AliasMode records (priority 0) carry no service parameters.
    return record.priority != 0 and any(k == key for k, _ in record.svc_params)


@dataclass(frozen=True)
class CacheEntry:
    supports_turbo: bool
    learned_at: float
    ttl: float

    @property
    def expires_at(self) -> float:
        return self.learned_at + self.ttl


class CapabilityCache:
    """Per-domain memory of TurboTLS support. Expired entries are never returned."""

    def __init__(self) -> None:
        self._entries: Dict[str, CacheEntry] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(domain: str) -> str:
        return domain.lower().rstrip(".")

    def store(self, domain: str, supports_turbo: bool, now: float, ttl: float) -> None:
        if ttl < 0:
            raise ValueError("ttl must be non-negative")
        with self._lock:
            self._entries[self._key(domain)] = CacheEntry(supports_turbo, now, ttl)

    def learn(self, domain: str, record: HttpsRecord, now: float, ttl: float) -> bool:
        flag = supports_turbotls(record)
        self.store(domain, flag, now, ttl)
        return flag

    def lookup(self, domain: str, now: float) -> Optional[bool]:
        entry = self._entries.get(self._key(domain))
        if entry is None or now >= entry.expires_at:
            return None
        return entry.supports_turbo

    def save(self, path: Union[str, Path]) -> None:
        with self._lock:
            lines = [
                f"{domain} {int(e.supports_turbo)} {e.learned_at!r} {e.ttl!r}\n"
                for domain, e in sorted(self._entries.items())
            ]
        Path(path).write_text("".join(lines))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CapabilityCache":
        cache = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                domain, flag, learned_at, ttl = line.split()
                cache.store(domain, flag == "1", float(learned_at), float(ttl))
            except ValueError:
                raise DiscoveryError(f"{path}:{lineno}: bad cache line {line!r}") from None
        return cache


def cache_store(
    cache: CapabilityCache, domain: str, supports_turbo: bool, now: float, ttl: float
) -> None:
    cache.store(domain, supports_turbo, now, ttl)


def cache_lookup(cache: CapabilityCache, domain: str, now: float) -> Optional[bool]:
    return cache.lookup(domain, now)
