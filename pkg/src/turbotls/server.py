"""
Server side: UDP ClientHello reassembly, credit-limited response release and
TCP attachment.

A response datagram is only ever sent against a request datagram already
received for the same connection id, so the server never emits more UDP
packets than it was sent. Nothing is sent for a connection id until its
ClientHello is complete.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Hashable, List, Optional

from .events import (
    AppData,
    CloseTcp,
    DeliverEvent,
    Established,
    SendTcpBytes,
    SendUdpDatagrams,
    SessionFailed,
    TcpAccepted,
    TcpBytes,
    TcpClosed,
    Tick,
    UdpDatagram,
)
from .fragment import DEFAULT_DATAGRAM_BUDGET, fragment_message
from .handshake import HandshakeEngine, HandshakeError, Verdict, split_flight
from .reassembly import BufferConfig, Complete, ReassemblyBuffer, Rejected
from .wire import (
    PREFACE_MAGIC,
    PREFACE_SIZE,
    FragType,
    TurboAttach,
    WireError,
    decode_fragment,
    decode_tcp_preface,
)

logger = logging.getLogger("turbotls.server")


@dataclass
class ServerConfig:
    datagram_budget: int = DEFAULT_DATAGRAM_BUDGET
    buffer: BufferConfig = field(default_factory=BufferConfig)
    max_sessions: int = 4096
    session_ttl: float = 2.0
    echo: bool = True
    # Rate-limit hook for CPU spent on UDP ClientHellos: (conn_id, now) -> admit?
    admit_client_hello: Optional[Callable[[bytes, float], bool]] = None


@dataclass
class UdpSession:
    conn_id: bytes
    engine: Optional[HandshakeEngine]
    response_fragments: List[bytes]
    requests_seen: int
    peer: Any
    created_at: float
    fragments_sent: int = 0


@dataclass
class StreamState:
    stream: Hashable
    peer: Any = None
    mode: Optional[str] = None
    rx: bytes = b""
    engine: Optional[HandshakeEngine] = None
    conn_id: Optional[bytes] = None
    responded: bool = False
    established: bool = False


class ServerState:
    def __init__(
        self,
        engine_factory: Callable[[], HandshakeEngine],
        config: Optional[ServerConfig] = None,
    ) -> None:
        self.config = config or ServerConfig()
        self.engine_factory = engine_factory
        self.buffer = ReassemblyBuffer(self.config.buffer)
        self.sessions: Dict[bytes, UdpSession] = {}
        self.streams: Dict[Hashable, StreamState] = {}
        self.counters: Dict[str, int] = {
            "udp_pkts_in": 0,
            "udp_pkts_out": 0,
            "udp_bytes_in": 0,
            "udp_bytes_out": 0,
            "udp_dropped": 0,
            "ch_complete": 0,
            "engine_invocations": 0,
            "established_turbo": 0,
            "established_vanilla": 0,
            "unknown_conn_id": 0,
            "rejected": 0,
        }

    def handle(self, event: object, now: float) -> List[object]:
        if isinstance(event, UdpDatagram):
            return self._on_udp(event.data, event.peer, now)
        if isinstance(event, TcpAccepted):
            self.streams[event.stream] = StreamState(event.stream, event.peer)
            return []
        if isinstance(event, TcpBytes):
            return self._on_tcp_bytes(event.stream, event.data, now)
        if isinstance(event, TcpClosed):
            self.streams.pop(event.stream, None)
            return []
        if isinstance(event, Tick):
            self.evict(now)
            return []
        raise TypeError(f"unexpected event {event!r}")

    # -- UDP -------------------------------------------------------------------

    def _on_udp(self, data: bytes, peer: Any, now: float) -> List[object]:
        self.counters["udp_pkts_in"] += 1
        self.counters["udp_bytes_in"] += len(data)
        try:
            header, payload = decode_fragment(data)
        except WireError:
            self.counters["udp_dropped"] += 1
            return []
        if header.frag_type == FragType.RESP_FRAG:
            self.counters["udp_dropped"] += 1
            return []

        session = self.sessions.get(header.conn_id)
        if session is not None:
            session.requests_seen += 1
            session.peer = peer
            return self._release(session)

        result = self.buffer.insert_fragment(header, payload, now)
        if isinstance(result, Rejected):
            self.counters["udp_dropped"] += 1
            return []
        if not isinstance(result, Complete):
            return []

        entry = self.buffer.discard(header.conn_id)
        assert entry is not None
        self.counters["ch_complete"] += 1
        if len(self.sessions) >= self.config.max_sessions:
            self.counters["udp_dropped"] += 1
            return []
        session = UdpSession(
            header.conn_id, None, [], entry.requests_seen, peer, created_at=now
        )
        self.sessions[header.conn_id] = session
        hook = self.config.admit_client_hello
        if hook is not None and not hook(header.conn_id, now):
            return []

        engine = self.engine_factory()
        self.counters["engine_invocations"] += 1
        try:
            response = engine.server_response(result.message)
        except HandshakeError as exc:
            logger.debug("conn %s: bad ClientHello: %s", header.conn_id.hex(), exc)
            self.counters["rejected"] += 1
            return []
        session.engine = engine
        session.response_fragments = fragment_message(
            response, header.conn_id, FragType.RESP_FRAG, self.config.datagram_budget
        )
        return self._release(session)

    def _release(self, session: UdpSession) -> List[object]:
        allowed = min(len(session.response_fragments), session.requests_seen)
        batch = session.response_fragments[session.fragments_sent : allowed]
        if not batch:
            return []
        session.fragments_sent = allowed
        assert session.fragments_sent <= session.requests_seen
        self.counters["udp_pkts_out"] += len(batch)
        self.counters["udp_bytes_out"] += sum(len(d) for d in batch)
        return [SendUdpDatagrams(list(batch), session.peer)]

    def evict(self, now: float) -> int:
        evicted = self.buffer.evict_expired(now)
        ttl = self.config.session_ttl
        stale = [cid for cid, s in self.sessions.items() if now - s.created_at > ttl]
        for cid in stale:
            del self.sessions[cid]
        return evicted + len(stale)

    # -- TCP -------------------------------------------------------------------

    def _on_tcp_bytes(self, stream: Hashable, data: bytes, now: float) -> List[object]:
        st = self.streams.get(stream)
        if st is None:
            st = self.streams[stream] = StreamState(stream)
        st.rx += data

        if st.mode is None:
            if not st.rx:
                return []
            if st.rx[0] == PREFACE_MAGIC[0]:
                if len(st.rx) < PREFACE_SIZE:
                    if not PREFACE_MAGIC.startswith(st.rx[: len(PREFACE_MAGIC)]):
                        return self._close(st, "malformed preface")
                    return []
                try:
                    attach = decode_tcp_preface(st.rx)
                except WireError as exc:
                    return self._close(st, str(exc))
                assert isinstance(attach, TurboAttach)
                session = self.sessions.pop(attach.conn_id, None)
                if session is None or session.engine is None:
                    self.counters["unknown_conn_id"] += 1
                    return self._close(st, f"unknown connection id {attach.conn_id.hex()}")
                st.mode = "turbo"
                st.conn_id = attach.conn_id
                st.engine = session.engine
                st.responded = True
                st.rx = st.rx[attach.consumed :]
            else:
                # Fallback and plain clients look identical from here; any UDP
                # state they left behind ages out on Tick.
                st.mode = "vanilla"

        actions: List[object] = []
        if st.established:
            if st.rx:
                actions += self._app_data(st, st.rx)
                st.rx = b""
            return actions

        if not st.responded:
            cut = split_flight(st.rx)
            if cut is None:
                return actions
            hello, st.rx = cut
            st.engine = self.engine_factory()
            self.counters["engine_invocations"] += 1
            try:
                response = st.engine.server_response(hello)
            except HandshakeError as exc:
                return actions + self._close(st, f"bad ClientHello: {exc}")
            st.responded = True
            actions.append(SendTcpBytes(response, stream))

        cut = split_flight(st.rx)
        if cut is None:
            return actions
        finish, st.rx = cut
        assert st.engine is not None
        if st.engine.server_verify_finish(finish) != Verdict.ACCEPT:
            return actions + self._close(st, "finish rejected")
        st.established = True
        self.counters[f"established_{st.mode}"] += 1
        logger.info(
            "session conn_id=%s path=%s t=%.6f",
            st.conn_id.hex() if st.conn_id else "-",
            st.mode,
            now,
        )
        actions.append(DeliverEvent(Established(st.mode, st.conn_id, stream)))
        if st.rx:
            actions += self._app_data(st, st.rx)
            st.rx = b""
        return actions

    def _app_data(self, st: StreamState, data: bytes) -> List[object]:
        actions: List[object] = [DeliverEvent(AppData(data, st.stream))]
        if self.config.echo:
            actions.append(SendTcpBytes(data, st.stream))
        return actions

    def _close(self, st: StreamState, reason: str) -> List[object]:
        self.counters["rejected"] += 1
        self.streams.pop(st.stream, None)
        logger.info("closing stream %s: %s", st.stream, reason)
        return [DeliverEvent(SessionFailed(reason, st.stream)), CloseTcp(st.stream, reason)]

    # -- reporting -------------------------------------------------------------

    def amplification_report(self) -> Dict[str, int]:
        c = self.counters
        assert c["udp_pkts_out"] <= c["udp_pkts_in"]
        return {
            "udp_bytes_in": c["udp_bytes_in"],
            "udp_bytes_out": c["udp_bytes_out"],
            "udp_pkts_in": c["udp_pkts_in"],
            "udp_pkts_out": c["udp_pkts_out"],
        }


def server_step(state: ServerState, event: object, now: float):
    return state, state.handle(event, now)


def amplification_report(state: ServerState) -> Dict[str, int]:
    return state.amplification_report()
