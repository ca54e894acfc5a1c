"""
asyncio drivers running the sans-I/O state machines over real sockets.

Everything for one process runs on a single event loop, which is what
serializes mutations of the shared server state.
"""

import asyncio
import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from .client import ClientConfig, ClientState, Phase
from .events import (
    AppData,
    CloseTcp,
    DeliverEvent,
    Established,
    OpenTcp,
    SendTcpBytes,
    SendUdpDatagrams,
    SessionFailed,
    SetTimer,
    TcpAccepted,
    TcpBytes,
    TcpClosed,
    TcpConnected,
    TcpFailed,
    Tick,
    Timer,
    UdpDatagram,
)
from .handshake import HandshakeEngine
from .server import ServerState

logger = logging.getLogger("turbotls.transport")

READ_SIZE = 65536


class _ServerUdp(asyncio.DatagramProtocol):
    def __init__(self, server: "TurboServer") -> None:
        self.server = server

    def connection_made(self, transport) -> None:
        self.transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        self.server.dispatch(UdpDatagram(data, addr))

    def error_received(self, exc: Exception) -> None:
        logger.debug("server UDP error: %s", exc)


class TurboServer:
    def __init__(self, state: ServerState, tick_interval: float = 1.0) -> None:
        self.state = state
        self.tick_interval = tick_interval
        self._udp: Optional[asyncio.DatagramTransport] = None
        self._tcp: Optional[asyncio.AbstractServer] = None
        self._writers: Dict[int, asyncio.StreamWriter] = {}
        self._ids = itertools.count(1)
        self._ticker: Optional[asyncio.Task] = None
        self.udp_address: Optional[Tuple[str, int]] = None
        self.tcp_address: Optional[Tuple[str, int]] = None

    def _now(self) -> float:
        return asyncio.get_running_loop().time()

    async def start(self, host: str, udp_port: int, tcp_port: int) -> None:
        loop = asyncio.get_running_loop()
        self._tcp = await asyncio.start_server(self._on_connection, host, tcp_port)
        self.tcp_address = self._tcp.sockets[0].getsockname()[:2]
        self._udp, _ = await loop.create_datagram_endpoint(
            lambda: _ServerUdp(self), local_addr=(host, udp_port)
        )
        self.udp_address = self._udp.get_extra_info("sockname")[:2]
        self._ticker = asyncio.create_task(self._tick())

    async def close(self) -> None:
        if self._ticker:
            self._ticker.cancel()
        if self._udp:
            self._udp.close()
        if self._tcp:
            self._tcp.close()
            await self._tcp.wait_closed()
        for writer in self._writers.values():
            writer.close()

    async def _tick(self) -> None:
        while True:
            await asyncio.sleep(self.tick_interval)
            self.dispatch(Tick())

    def dispatch(self, event: object) -> None:
        self._apply(self.state.handle(event, self._now()))

    def _apply(self, actions: List[object]) -> None:
        for action in actions:
            if isinstance(action, SendUdpDatagrams) and self._udp is not None:
                for datagram in action.datagrams:
                    self._udp.sendto(datagram, action.peer)
            elif isinstance(action, SendTcpBytes):
                writer = self._writers.get(action.stream)
                if writer is not None:
                    writer.write(action.data)
            elif isinstance(action, CloseTcp):
                writer = self._writers.pop(action.stream, None)
                if writer is not None:
                    writer.close()
            elif isinstance(action, DeliverEvent) and isinstance(action.observable, Established):
                obs = action.observable
                logger.info(
                    "established via %s path conn_id=%s",
                    obs.path,
                    obs.conn_id.hex() if obs.conn_id else "-",
                )

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        stream = next(self._ids)
        self._writers[stream] = writer
        self.dispatch(TcpAccepted(stream, writer.get_extra_info("peername")))
        try:
            while True:
                data = await reader.read(READ_SIZE)
                if not data:
                    break
                if stream not in self._writers:
                    break
                self.dispatch(TcpBytes(data, stream))
                await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self.dispatch(TcpClosed(stream))
            self._writers.pop(stream, None)
            writer.close()


class _ClientUdp(asyncio.DatagramProtocol):
    def __init__(self, session: "ClientSession") -> None:
        self.session = session

    def datagram_received(self, data: bytes, addr) -> None:
        self.session.dispatch(UdpDatagram(data, addr))

    def error_received(self, exc: Exception) -> None:
        # ICMP port unreachable and friends; the grace timer covers it.
        logger.debug("client UDP error: %s", exc)


@dataclass
class ConnectResult:
    path: str
    time_to_first_app_byte: float
    echo: bytes


class ClientSession:
    def __init__(
        self,
        config: ClientConfig,
        engine: HandshakeEngine,
        host: str,
        udp_port: int,
        tcp_port: int,
    ) -> None:
        self.state = ClientState(config, engine)
        self.host = host
        self.udp_port = udp_port
        self.tcp_port = tcp_port
        self._udp: Optional[asyncio.DatagramTransport] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._tasks: List[asyncio.Task] = []
        self._timers: List[asyncio.TimerHandle] = []
        self.established: asyncio.Future = asyncio.get_running_loop().create_future()
        self.app_data: asyncio.Queue = asyncio.Queue()

    def dispatch(self, event: object) -> None:
        if self.state.phase == Phase.FAILED:
            return
        now = asyncio.get_running_loop().time()
        try:
            actions = self.state.handle(event, now)
        except Exception as exc:
            self._resolve_error(exc)
            return
        self._apply(actions)

    async def run(self, timeout: float = 5.0) -> ConnectResult:
        loop = asyncio.get_running_loop()
        if self.state.config.turbo:
            self._udp, _ = await loop.create_datagram_endpoint(
                lambda: _ClientUdp(self), remote_addr=(self.host, self.udp_port)
            )
        self._apply(self.state.start(loop.time()))
        try:
            path = await asyncio.wait_for(asyncio.shield(self.established), timeout)
            expected = self.state.config.app_data
            echo = b""
            while len(echo) < len(expected):
                echo += await asyncio.wait_for(self.app_data.get(), timeout)
            ttfab = self.state.time_to_first_app_byte or 0.0
            return ConnectResult(path, ttfab, echo)
        finally:
            self.close()

    def close(self) -> None:
        for handle in self._timers:
            handle.cancel()
        for task in self._tasks:
            task.cancel()
        if self._udp is not None:
            self._udp.close()
        if self._writer is not None:
            self._writer.close()

    def _resolve_error(self, exc: BaseException) -> None:
        if not self.established.done():
            self.established.set_exception(exc)

    def _apply(self, actions: List[object]) -> None:
        loop = asyncio.get_running_loop()
        for action in actions:
            if isinstance(action, SendUdpDatagrams) and self._udp is not None:
                for datagram in action.datagrams:
                    self._udp.sendto(datagram)
            elif isinstance(action, OpenTcp):
                self._tasks.append(asyncio.create_task(self._open_tcp()))
            elif isinstance(action, SendTcpBytes) and self._writer is not None:
                self._writer.write(action.data)
            elif isinstance(action, CloseTcp) and self._writer is not None:
                self._writer.close()
            elif isinstance(action, SetTimer):
                self._timers.append(
                    loop.call_later(action.delay, self.dispatch, Timer(action.tag))
                )
            elif isinstance(action, DeliverEvent):
                obs = action.observable
                if isinstance(obs, Established):
                    logger.info("established via %s path", obs.path)
                    if not self.established.done():
                        self.established.set_result(obs.path)
                elif isinstance(obs, AppData):
                    self.app_data.put_nowait(obs.data)
                elif isinstance(obs, SessionFailed):
                    self._resolve_error(ConnectionError(obs.reason))

    async def _open_tcp(self) -> None:
        try:
            reader, self._writer = await asyncio.open_connection(self.host, self.tcp_port)
        except OSError as exc:
            self.dispatch(TcpFailed(str(exc)))
            return
        self.dispatch(TcpConnected())
        try:
            while True:
                data = await reader.read(READ_SIZE)
                if not data:
                    break
                self.dispatch(TcpBytes(data))
        except ConnectionError:
            pass
        if self.state.phase != Phase.FAILED and not self.established.done():
            self.dispatch(TcpFailed("connection closed"))


async def connect(
    config: ClientConfig,
    engine: HandshakeEngine,
    host: str,
    udp_port: int,
    tcp_port: int,
    timeout: float = 5.0,
) -> ConnectResult:
    session = ClientSession(config, engine, host, udp_port, tcp_port)
    return await session.run(timeout)
