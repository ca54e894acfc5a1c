"""
Bounded reassembly of fragmented flights.

The same store serves the server (ClientHello fragments plus pad requests)
and the client (response fragments). Memory is accounted up front from the
advertised total length, and admission is refused rather than evicting live
entries when a cap would be breached.
"""

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

from .wire import FragmentHeader, FragType

ENTRY_OVERHEAD = 128
DEFAULT_ENTRY_TTL = 2.0
DEFAULT_MAX_ENTRY_BYTES = 64 * 1024


@dataclass(frozen=True)
class BufferConfig:
    max_total_bytes: int = 4 * 1024 * 1024
    max_entries: int = 1024
    entry_ttl: float = DEFAULT_ENTRY_TTL
    max_entry_bytes: int = DEFAULT_MAX_ENTRY_BYTES

    def __post_init__(self) -> None:
        for name in ("max_total_bytes", "max_entries", "entry_ttl", "max_entry_bytes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class RejectReason(Enum):
    CAPACITY_EXCEEDED = "capacity-exceeded"
    ENTRY_TOO_LARGE = "entry-too-large"
    INCONSISTENT = "inconsistent"


@dataclass(frozen=True)
class Incomplete:
    received: int
    total_len: int


@dataclass(frozen=True)
class Complete:
    message: bytes


@dataclass(frozen=True)
class PadRecorded:
    requests_seen: int


@dataclass(frozen=True)
class AlreadyComplete:
    pass


@dataclass(frozen=True)
class Rejected:
    reason: RejectReason
    detail: str = ""


InsertResult = Union[Incomplete, Complete, PadRecorded, AlreadyComplete, Rejected]


@dataclass
class ReassemblyEntry:
    conn_id: bytes
    created_at: float
    last_touched: float
    total_len: Optional[int] = None
    buffer: Optional[bytearray] = None
    # sorted, disjoint, non-adjacent half-open intervals
    received_ranges: List[Tuple[int, int]] = field(default_factory=list)
    requests_seen: int = 0
    complete: bool = False

    @property
    def received(self) -> int:
        return sum(end - start for start, end in self.received_ranges)

    @property
    def accounted_bytes(self) -> int:
        held = self.total_len if self.buffer is not None else 0
        return ENTRY_OVERHEAD + (held or 0)

    def overlaps(self, start: int, end: int) -> List[Tuple[int, int]]:
        return [(s, e) for s, e in self.received_ranges if s < end and start < e]

    def add_range(self, start: int, end: int) -> None:
        ranges = self.received_ranges
        i = bisect.bisect_left(ranges, (start, end))
        ranges.insert(i, (start, end))
        merged: List[Tuple[int, int]] = []
        for s, e in ranges:
            if merged and s <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], e))
            else:
                merged.append((s, e))
        self.received_ranges = merged


class ReassemblyBuffer:
    """
    Store of partially received flights keyed by connection id.

    Single-writer: every mutation must come from the owning event loop.
    """

    def __init__(self, config: Optional[BufferConfig] = None) -> None:
        self.config = config or BufferConfig()
        self._entries: Dict[bytes, ReassemblyEntry] = {}
        self._memory = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, conn_id: bytes) -> bool:
        return conn_id in self._entries

    def get(self, conn_id: bytes) -> Optional[ReassemblyEntry]:
        return self._entries.get(conn_id)

    def memory_in_use(self) -> int:
        return self._memory

    def _reserve(self, extra: int) -> bool:
        if self._memory + extra > self.config.max_total_bytes:
            return False
        self._memory += extra
        return True

    def _admit(self, conn_id: bytes, now: float) -> Union[ReassemblyEntry, Rejected]:
        if len(self._entries) >= self.config.max_entries:
            return Rejected(RejectReason.CAPACITY_EXCEEDED, "entry limit reached")
        if not self._reserve(ENTRY_OVERHEAD):
            return Rejected(RejectReason.CAPACITY_EXCEEDED, "memory limit reached")
        entry = ReassemblyEntry(conn_id, created_at=now, last_touched=now)
        self._entries[conn_id] = entry
        return entry

    def _allocate(self, entry: ReassemblyEntry, total_len: int) -> Optional[Rejected]:
        if total_len > self.config.max_entry_bytes:
            return Rejected(
                RejectReason.ENTRY_TOO_LARGE,
                f"total length {total_len} over per-entry cap",
            )
        if not self._reserve(total_len):
            return Rejected(RejectReason.CAPACITY_EXCEEDED, "memory limit reached")
        entry.total_len = total_len
        entry.buffer = bytearray(total_len)
        return None

    def _drop_if_empty(self, entry: ReassemblyEntry) -> None:
        if entry.total_len is None and entry.requests_seen == 0:
            self.discard(entry.conn_id)

    def insert_fragment(
        self, header: FragmentHeader, payload: bytes, now: float
    ) -> InsertResult:
        entry = self._entries.get(header.conn_id)
        if entry is None:
            admitted = self._admit(header.conn_id, now)
            if isinstance(admitted, Rejected):
                return admitted
            entry = admitted
        entry.last_touched = now

        if entry.complete:
            if header.frag_type != FragType.RESP_FRAG:
                entry.requests_seen += 1
            return AlreadyComplete()

        if header.frag_type == FragType.PAD_REQ:
            entry.requests_seen += 1
            return PadRecorded(entry.requests_seen)

        if entry.total_len is None:
            rejected = self._allocate(entry, header.total_len)
            if rejected is not None:
                self._drop_if_empty(entry)
                return rejected
        elif entry.total_len != header.total_len:
            return Rejected(
                RejectReason.INCONSISTENT,
                f"total length {header.total_len} != {entry.total_len}",
            )

        assert entry.buffer is not None
        start, end = header.offset, header.offset + len(payload)
        for s, e in entry.overlaps(start, end):
            lo, hi = max(s, start), min(e, end)
            if entry.buffer[lo:hi] != payload[lo - start : hi - start]:
                return Rejected(RejectReason.INCONSISTENT, "overlapping bytes differ")

        if header.frag_type == FragType.CH_FRAG:
            entry.requests_seen += 1
        if end > start:
            entry.buffer[start:end] = payload
            entry.add_range(start, end)

        if entry.received_ranges == [(0, entry.total_len)]:
            message = bytes(entry.buffer)
            entry.complete = True
            self._memory -= entry.total_len
            entry.buffer = None
            return Complete(message)
        return Incomplete(entry.received, entry.total_len)

    def discard(self, conn_id: bytes) -> Optional[ReassemblyEntry]:
        entry = self._entries.pop(conn_id, None)
        if entry is not None:
            self._memory -= entry.accounted_bytes
        return entry

    def evict_expired(self, now: float) -> int:
        ttl = self.config.entry_ttl
        expired = [cid for cid, e in self._entries.items() if now - e.created_at > ttl]
        for cid in expired:
            self.discard(cid)
        return len(expired)


def insert_fragment(
    buffer: ReassemblyBuffer, header: FragmentHeader, payload: bytes, now: float
) -> InsertResult:
    return buffer.insert_fragment(header, payload, now)


def evict_expired(buffer: ReassemblyBuffer, now: float) -> int:
    return buffer.evict_expired(now)


def memory_in_use(buffer: ReassemblyBuffer) -> int:
    return buffer.memory_in_use()
