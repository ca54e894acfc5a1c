"""
Event and action vocabulary shared by the client and server state machines.

Events flow into a state machine; actions flow out. Neither machine performs
I/O, so the same core runs under the simulator and over real sockets.
"""

from dataclasses import dataclass, field
from typing import Any, Hashable, List, Optional


# -- events ------------------------------------------------------------------


@dataclass(frozen=True)
class UdpDatagram:
    data: bytes
    peer: Any = None


@dataclass(frozen=True)
class TcpConnected:
    pass


@dataclass(frozen=True)
class TcpAccepted:
    stream: Hashable
    peer: Any = None


@dataclass(frozen=True)
class TcpBytes:
    data: bytes
    stream: Hashable = None


@dataclass(frozen=True)
class TcpClosed:
    stream: Hashable = None


@dataclass(frozen=True)
class TcpFailed:
    reason: str = ""


@dataclass(frozen=True)
class Timer:
    tag: str


@dataclass(frozen=True)
class Tick:
    pass


# -- actions -----------------------------------------------------------------


@dataclass(frozen=True)
class SendUdpDatagrams:
    datagrams: List[bytes] = field(default_factory=list)
    peer: Any = None


@dataclass(frozen=True)
class OpenTcp:
    pass


@dataclass(frozen=True)
class SendTcpBytes:
    data: bytes
    stream: Hashable = None


@dataclass(frozen=True)
class CloseTcp:
    stream: Hashable = None
    reason: str = ""


@dataclass(frozen=True)
class SetTimer:
    delay: float
    tag: str


@dataclass(frozen=True)
class DeliverEvent:
    observable: Any


@dataclass(frozen=True)
class RecordMetric:
    name: str
    value: float = 1


# -- observables carried by DeliverEvent ---------------------------------------


@dataclass(frozen=True)
class Established:
    path: str  # "turbo", "fallback" or "vanilla"
    conn_id: Optional[bytes] = None
    stream: Hashable = None


@dataclass(frozen=True)
class AppData:
    data: bytes
    stream: Hashable = None


@dataclass(frozen=True)
class SessionFailed:
    reason: str
    stream: Hashable = None
