"""
Client side of the handshake race.

At start the client fires its whole UDP request flight and opens TCP in the
same step. Whichever way the response arrives, the finish flight and the
first application bytes travel over TCP:

* UDP response complete and TCP up: send ``preface | finish | app data``.
* TCP up first: wait a short grace period for UDP, then resend the
  ClientHello as plain TLS over TCP.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

from .events import (
    AppData,
    CloseTcp,
    DeliverEvent,
    Established,
    OpenTcp,
    RecordMetric,
    SendTcpBytes,
    SendUdpDatagrams,
    SessionFailed,
    SetTimer,
    TcpBytes,
    TcpConnected,
    TcpFailed,
    Timer,
    UdpDatagram,
)
from .fragment import DEFAULT_DATAGRAM_BUDGET, DEFAULT_PAD_MARGIN, FragmentPlan, plan_request_flight
from .handshake import HandshakeEngine, HandshakeError, split_flight
from .reassembly import BufferConfig, Complete, ReassemblyBuffer
from .wire import FragType, WireError, decode_fragment, encode_tcp_preface, new_conn_id

logger = logging.getLogger("turbotls.client")

GRACE_TIMER = "grace"


class ProtocolViolation(Exception):
    pass


class Phase(Enum):
    INIT = "init"
    RACING = "racing"
    TCP_READY_UDP_PENDING = "tcp-ready-udp-pending"
    UDP_COMPLETE_TCP_PENDING = "udp-complete-tcp-pending"
    FALLING_BACK = "falling-back"
    ESTABLISHED = "established"
    FAILED = "failed"


@dataclass
class ClientConfig:
    datagram_budget: int = DEFAULT_DATAGRAM_BUDGET
    grace_delay: float = 0.002
    grace_rtt_fraction: float = 0.25
    # None: ask the handshake engine for its response-size bound
    response_estimate: Optional[int] = None
    pad_margin: int = DEFAULT_PAD_MARGIN
    turbo: bool = True
    app_data: bytes = b""

    def __post_init__(self) -> None:
        if self.grace_delay < 0:
            raise ValueError("grace_delay must be non-negative")
        if not 0 <= self.grace_rtt_fraction <= 1:
            raise ValueError("grace_rtt_fraction must lie in [0, 1]")
        if self.pad_margin < 0:
            raise ValueError("pad_margin must be non-negative")


class ClientState:
    def __init__(
        self,
        config: ClientConfig,
        engine: HandshakeEngine,
        conn_id: Optional[bytes] = None,
    ) -> None:
        self.config = config
        self.engine = engine
        self.conn_id = conn_id if conn_id is not None else new_conn_id()
        self.phase = Phase.INIT
        self.plan: Optional[FragmentPlan] = None
        self.response_buffer = ReassemblyBuffer(BufferConfig(max_entries=1))
        self.path: Optional[str] = None
        self.sent_at: Optional[float] = None
        self.tcp_ready_at: Optional[float] = None
        self.first_udp_resp_at: Optional[float] = None
        self.established_at: Optional[float] = None
        self.fallback_at: Optional[float] = None
        self.grace_armed: Optional[float] = None
        self.metrics: Counter = Counter()
        self.trace: List[dict] = []
        self._tcp_connected = False
        self._udp_unusable = False
        self._finish: Optional[bytes] = None
        self._tcp_rx = b""

    @property
    def observed_rtt(self) -> Optional[float]:
        if self.first_udp_resp_at is None or self.sent_at is None:
            return None
        return self.first_udp_resp_at - self.sent_at

    def grace(self) -> float:
        rtt = self.observed_rtt
        if rtt is None:
            return self.config.grace_delay
        return max(self.config.grace_delay, self.config.grace_rtt_fraction * rtt)

    @property
    def time_to_first_app_byte(self) -> Optional[float]:
        if self.established_at is None or self.sent_at is None:
            return None
        return self.established_at - self.sent_at

    # -- driving ---------------------------------------------------------------

    def start(self, now: float) -> List[object]:
        if self.phase != Phase.INIT:
            raise ProtocolViolation("client already started")
        self.sent_at = now
        self.phase = Phase.RACING
        if not self.config.turbo:
            actions: List[object] = [OpenTcp()]
            self._record("start", now, actions)
            return actions

        hello = self.engine.client_first_flight()
        estimate = self.config.response_estimate or self.engine.response_size_bound()
        self.plan = plan_request_flight(
            hello,
            self.conn_id,
            self.config.datagram_budget,
            estimate,
            self.config.pad_margin,
        )
        self.metrics["udp_pkts_out"] += self.plan.total_requests
        self.metrics["udp_bytes_out"] += self.plan.request_bytes
        actions = [SendUdpDatagrams(self.plan.datagrams), OpenTcp()]
        self._record("start", now, actions)
        return actions

    def handle(self, event: object, now: float) -> List[object]:
        if self.phase == Phase.INIT:
            raise ProtocolViolation("client not started")
        if isinstance(event, UdpDatagram):
            actions = self._on_udp(event.data, now)
        elif isinstance(event, TcpConnected):
            actions = self._on_tcp_connected(now)
        elif isinstance(event, TcpBytes):
            actions = self._on_tcp_bytes(event.data, now)
        elif isinstance(event, Timer):
            actions = self._on_timer(event.tag, now)
        elif isinstance(event, TcpFailed):
            actions = self._fail(event.reason or "tcp failed", close=False)
        else:
            raise ProtocolViolation(f"unexpected event {event!r}")
        self._record(type(event).__name__, now, actions)
        return actions

    # -- handlers ----------------------------------------------------------------

    def _on_udp(self, data: bytes, now: float) -> List[object]:
        self.metrics["udp_pkts_in"] += 1
        self.metrics["udp_bytes_in"] += len(data)
        if self.phase not in (Phase.RACING, Phase.TCP_READY_UDP_PENDING):
            self.metrics["udp_late"] += 1
            return []
        if self._udp_unusable:
            self.metrics["udp_ignored"] += 1
            return []
        try:
            header, payload = decode_fragment(data)
        except WireError:
            self.metrics["udp_malformed"] += 1
            return []
        if header.frag_type != FragType.RESP_FRAG or header.conn_id != self.conn_id:
            self.metrics["udp_foreign"] += 1
            return []
        if self.first_udp_resp_at is None:
            self.first_udp_resp_at = now
        result = self.response_buffer.insert_fragment(header, payload, now)
        if not isinstance(result, Complete):
            return []

        try:
            self._finish = self.engine.client_finish(result.message)
        except HandshakeError as exc:
            logger.debug("UDP response rejected: %s", exc)
            self.metrics["udp_rejected"] += 1
            self._udp_unusable = True
            if self._tcp_connected:
                return self._fall_back(now)
            return []

        if self._tcp_connected:
            return self._send_finish(now, "turbo", preface=True)
        self.phase = Phase.UDP_COMPLETE_TCP_PENDING
        return []

    def _on_tcp_connected(self, now: float) -> List[object]:
        if self._tcp_connected:
            raise ProtocolViolation("duplicate TcpConnected")
        if self.phase == Phase.FAILED:
            return []
        self._tcp_connected = True
        self.tcp_ready_at = now
        if not self.config.turbo:
            self.path = "vanilla"
            self.phase = Phase.FALLING_BACK
            return [SendTcpBytes(self.engine.client_first_flight())]
        if self.phase == Phase.UDP_COMPLETE_TCP_PENDING:
            return self._send_finish(now, "turbo", preface=True)
        if self._udp_unusable:
            return self._fall_back(now)
        self.phase = Phase.TCP_READY_UDP_PENDING
        self.grace_armed = self.grace()
        return [SetTimer(self.grace_armed, GRACE_TIMER)]

    def _on_timer(self, tag: str, now: float) -> List[object]:
        if tag == GRACE_TIMER and self.phase == Phase.TCP_READY_UDP_PENDING:
            return self._fall_back(now)
        self.metrics["stale_timer"] += 1
        return []

    def _on_tcp_bytes(self, data: bytes, now: float) -> List[object]:
        if not self._tcp_connected:
            raise ProtocolViolation("TCP bytes before TcpConnected")
        if self.phase == Phase.ESTABLISHED:
            return [DeliverEvent(AppData(data))]
        if self.phase != Phase.FALLING_BACK:
            raise ProtocolViolation(f"unexpected TCP bytes in phase {self.phase.value}")
        self._tcp_rx += data
        cut = split_flight(self._tcp_rx)
        if cut is None:
            return []
        response, rest = cut
        self._tcp_rx = b""
        try:
            self._finish = self.engine.client_finish(response)
        except HandshakeError as exc:
            return self._fail(f"handshake rejected: {exc}", close=True)
        actions = self._send_finish(now, self.path or "fallback", preface=False)
        if rest:
            actions.append(DeliverEvent(AppData(rest)))
        return actions

    # -- transitions ---------------------------------------------------------------

    def _fall_back(self, now: float) -> List[object]:
        self.phase = Phase.FALLING_BACK
        self.path = "fallback"
        self.fallback_at = now
        self.metrics["fallback"] += 1
        return [
            SendTcpBytes(self.engine.client_first_flight()),
            RecordMetric("fallback"),
        ]

    def _send_finish(self, now: float, path: str, preface: bool) -> List[object]:
        assert self._finish is not None
        self.metrics["finish_sent"] += 1
        assert self.metrics["finish_sent"] == 1, "finish flight must be sent once"
        self.phase = Phase.ESTABLISHED
        self.path = path
        self.established_at = now
        head = encode_tcp_preface(self.conn_id) if preface else b""
        ttfab = self.time_to_first_app_byte
        return [
            SendTcpBytes(head + self._finish + self.config.app_data),
            DeliverEvent(Established(path, self.conn_id)),
            RecordMetric("time_to_first_app_byte", ttfab),
        ]

    def _fail(self, reason: str, close: bool) -> List[object]:
        self.phase = Phase.FAILED
        actions: List[object] = [DeliverEvent(SessionFailed(reason))]
        if close:
            actions.append(CloseTcp(reason=reason))
        return actions

    def _record(self, event: str, now: float, actions: List[object]) -> None:
        self.trace.append(
            {
                "t": now,
                "event": event,
                "phase": self.phase.value,
                "actions": [type(a).__name__ for a in actions],
            }
        )


def dump_trace(state: ClientState) -> str:
    return "\n".join(json.dumps(line, sort_keys=True) for line in state.trace)


def client_start(
    config: ClientConfig,
    engine: HandshakeEngine,
    now: float,
    conn_id: Optional[bytes] = None,
) -> Tuple[ClientState, List[object]]:
    state = ClientState(config, engine, conn_id)
    return state, state.start(now)


def client_step(
    state: ClientState, event: object, now: float
) -> Tuple[ClientState, List[object]]:
    return state, state.handle(event, now)
