"""
Deterministic discrete-event simulation of TurboTLS and vanilla TLS sessions.

Virtual time is kept in integer nanoseconds so that round-trip arithmetic is
exact. The link model is deliberately coarse:

* TCP is reliable and in order. A connect completes one RTT after it is
  opened; bytes reach the peer one one-way delay after they are sent.
* UDP datagrams are independently dropped with ``udp_loss_prob`` and delayed
  by the one-way delay plus uniform jitter in ``[0, reorder_jitter]``.
* The server spends ``suite.compute`` seconds producing each response flight.
"""

import csv
import heapq
import inspect
import io
import itertools
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from .client import ClientConfig, ClientState
from .discovery import CapabilityCache, decode_https_rdata
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
from .handshake import MockSuite, get_suite, mock_engine
from .server import ServerConfig, ServerState
from .wire import CONN_ID_SIZE, HEADER_SIZE, WireError, decode_fragment

NS = 1_000_000_000
TICK_NS = NS
SERVER_DOMAIN = "server.example"
PERCENTILES = (50, 90, 99)


class ConfigInvalid(ValueError):
    pass


class Protocol(Enum):
    VANILLA = "vanilla"
    TURBO = "turbo"
    # consult the discovery cache for each session
    AUTO = "auto"


def _ns(seconds: float) -> int:
    return round(seconds * NS)


@dataclass(frozen=True)
class LinkModel:
    one_way_delay: float
    udp_loss_prob: float = 0.0
    reorder_jitter: float = 0.0
    seed: int = 0

    @classmethod
    def from_rtt_ms(cls, rtt_ms: float, **kwargs) -> "LinkModel":
        return cls(one_way_delay=rtt_ms / 2000.0, **kwargs)

    @property
    def rtt(self) -> float:
        return 2 * self.one_way_delay

    def validate(self) -> None:
        if self.one_way_delay < 0 or self.reorder_jitter < 0:
            raise ConfigInvalid("delays must be non-negative")
        if not 0 <= self.udp_loss_prob <= 1:
            raise ConfigInvalid("loss probability must lie in [0, 1]")


@dataclass
class Scenario:
    link: LinkModel
    suite: MockSuite
    protocol: Protocol = Protocol.TURBO
    sessions: int = 100
    # spacing between session starts, seconds
    session_interval: float = 0.05
    client: ClientConfig = field(default_factory=ClientConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    # HTTPS RR RDATA (hex) the client would see for the server, for AUTO
    https_rr: Optional[str] = None

    def validate(self) -> None:
        self.link.validate()
        if self.sessions < 1:
            raise ConfigInvalid("need at least one session")
        if self.session_interval < 0:
            raise ConfigInvalid("session interval must be non-negative")
        if self.client.datagram_budget <= HEADER_SIZE:
            raise ConfigInvalid("datagram budget too small")

    def to_config(self) -> str:
        values = {
            "protocol": self.protocol.value,
            "suite": self.suite.name.lower(),
            "rtt_ms": self.link.rtt * 1000,
            "loss": self.link.udp_loss_prob,
            "jitter_ms": self.link.reorder_jitter * 1000,
            "seed": self.link.seed,
            "sessions": self.sessions,
            "interval_ms": self.session_interval * 1000,
            "compute_ms": self.suite.compute * 1000,
            "grace_ms": self.client.grace_delay * 1000,
            "grace_rtt_fraction": self.client.grace_rtt_fraction,
            "budget": self.client.datagram_budget,
            "pad_margin": self.client.pad_margin,
        }
        if self.https_rr is not None:
            values["https_rr"] = self.https_rr
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in values.items())

    @classmethod
    def from_config(cls, text: str) -> "Scenario":
        values: Dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigInvalid(f"line {lineno}: expected key=value")
            values[key.strip()] = value.strip()
        unknown = set(values) - set(inspect.signature(build_scenario).parameters)
        if unknown:
            raise ConfigInvalid(f"unknown setting(s): {', '.join(sorted(unknown))}")
        return build_scenario(**values)


def build_scenario(
    rtt_ms: float = 100.0,
    loss: float = 0.0,
    jitter_ms: float = 0.0,
    seed: int = 0,
    suite: str = "pq",
    protocol: str = "turbo",
    sessions: int = 100,
    interval_ms: float = 50.0,
    compute_ms: float = 0.0,
    grace_ms: float = 2.0,
    grace_rtt_fraction: float = 0.25,
    budget: int = 1472,
    pad_margin: int = 1,
    https_rr: Optional[str] = None,
) -> Scenario:
    """Assemble a scenario from flat, possibly string-typed settings."""
    try:
        link = LinkModel.from_rtt_ms(
            float(rtt_ms),
            udp_loss_prob=float(loss),
            reorder_jitter=float(jitter_ms) / 1000,
            seed=int(seed),
        )
        client = ClientConfig(
            datagram_budget=int(budget),
            grace_delay=float(grace_ms) / 1000,
            grace_rtt_fraction=float(grace_rtt_fraction),
            pad_margin=int(pad_margin),
            app_data=b"ping",
        )
        scenario = Scenario(
            link=link,
            suite=get_suite(suite).with_compute(float(compute_ms) / 1000),
            protocol=Protocol(protocol),
            sessions=int(sessions),
            session_interval=float(interval_ms) / 1000,
            client=client,
            server=ServerConfig(datagram_budget=int(budget)),
            https_rr=https_rr or None,
        )
        if scenario.https_rr:
            decode_https_rdata(bytes.fromhex(scenario.https_rr))
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from None
    scenario.validate()
    return scenario


@dataclass(frozen=True)
class LossRecord:
    session: int
    direction: str  # "c2s" or "s2c"
    kind: str
    offset: int
    at_ns: int


@dataclass
class SessionResult:
    index: int
    conn_id: bytes
    protocol: str
    path: Optional[str] = None
    start_ns: int = 0
    established_ns: Optional[int] = None
    first_response_ns: Optional[int] = None
    failed: bool = False
    finish_flights: int = 0

    @property
    def time_to_first_app_byte_ns(self) -> Optional[int]:
        if self.established_ns is None:
            return None
        return self.established_ns - self.start_ns

    @property
    def time_to_first_response_byte_ns(self) -> Optional[int]:
        if self.first_response_ns is None:
            return None
        return self.first_response_ns - self.start_ns


def nearest_rank(values: Iterable[float], pct: float) -> float:
    ordered = sorted(values)
    if not ordered:
        return math.nan
    rank = max(1, math.ceil(pct / 100 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class RunMetrics:
    scenario: Scenario
    sessions: List[SessionResult]
    loss_log: List[LossRecord]
    server_counters: Dict[str, int]
    client_counters: Dict[str, int]

    @property
    def ttfab_ns(self) -> List[int]:
        return [s.time_to_first_app_byte_ns for s in self.sessions if s.established_ns is not None]

    @property
    def ttfrb_ns(self) -> List[int]:
        return [
            s.time_to_first_response_byte_ns
            for s in self.sessions
            if s.first_response_ns is not None
        ]

    def percentile_ms(self, pct: float, response: bool = False) -> float:
        sample = self.ttfrb_ns if response else self.ttfab_ns
        return nearest_rank(sample, pct) / 1e6

    @property
    def percentiles(self) -> Dict[str, float]:
        return {f"p{p}": self.percentile_ms(p) for p in PERCENTILES}

    @property
    def fallback_count(self) -> int:
        return sum(1 for s in self.sessions if s.path == "fallback")

    @property
    def established_count(self) -> int:
        return sum(1 for s in self.sessions if s.established_ns is not None)

    @property
    def failed_count(self) -> int:
        return sum(1 for s in self.sessions if s.failed)

    @property
    def packet_amplification(self) -> float:
        c = self.server_counters
        return c["udp_pkts_out"] / c["udp_pkts_in"] if c["udp_pkts_in"] else 0.0

    @property
    def byte_amplification(self) -> float:
        c = self.server_counters
        return c["udp_bytes_out"] / c["udp_bytes_in"] if c["udp_bytes_in"] else 0.0

    def csv_row(self) -> List[str]:
        sc = self.scenario
        p = self.percentiles
        return [
            sc.protocol.value,
            sc.suite.name,
            f"{sc.link.rtt * 1000:.3f}",
            f"{p['p50']:.3f}",
            f"{p['p90']:.3f}",
            f"{p['p99']:.3f}",
        ]


CSV_HEADER = ["protocol", "suite", "ping_ms", "median_ms", "p90_ms", "p99_ms"]


def to_csv(runs: Iterable[RunMetrics]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for run in runs:
        writer.writerow(run.csv_row())
    return out.getvalue()


def to_table(runs: Iterable[RunMetrics]) -> str:
    header = CSV_HEADER + ["fallbacks", "failed", "pkt_amp", "byte_amp"]
    rows = [
        run.csv_row()
        + [
            str(run.fallback_count),
            str(run.failed_count),
            f"{run.packet_amplification:.3f}",
            f"{run.byte_amplification:.3f}",
        ]
        for run in runs
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


class Simulator:
    """One scenario run: a single server shared by all client sessions."""

    def __init__(self, scenario: Scenario) -> None:
        scenario.validate()
        self.scenario = scenario
        self.rng = random.Random(scenario.link.seed)
        self.now_ns = 0
        self._queue: List[Tuple[int, int, object, object]] = []
        self._seq = itertools.count()
        self._engine_seeds = itertools.count(1_000_000)
        suite = scenario.suite
        self.server = ServerState(
            lambda: mock_engine(suite, next(self._engine_seeds)), scenario.server
        )
        self.clients: List[ClientState] = []
        self.results: List[SessionResult] = []
        self.loss_log: List[LossRecord] = []
        self._ready_at: Dict[object, int] = {}
        self.cache = CapabilityCache()
        if scenario.https_rr:
            self.cache.learn(SERVER_DOMAIN, decode_https_rdata(bytes.fromhex(scenario.https_rr)), 0.0, 3600.0)

    # -- scheduling --------------------------------------------------------------

    def _schedule(self, at_ns: int, target: object, event: object) -> None:
        heapq.heappush(self._queue, (at_ns, next(self._seq), target, event))

    def _send_udp(self, session: int, direction: str, datagram: bytes, target: object, event: object) -> None:
        link = self.scenario.link
        if link.udp_loss_prob and self.rng.random() < link.udp_loss_prob:
            try:
                header, _ = decode_fragment(datagram)
                kind, offset = header.frag_type.name, header.offset
            except WireError:
                kind, offset = "MALFORMED", -1
            self.loss_log.append(LossRecord(session, direction, kind, offset, self.now_ns))
            return
        delay = _ns(link.one_way_delay)
        if link.reorder_jitter:
            delay += _ns(self.rng.uniform(0, link.reorder_jitter))
        self._schedule(self.now_ns + delay, target, event)

    # -- run ---------------------------------------------------------------------

    def run(self) -> RunMetrics:
        sc = self.scenario
        interval = _ns(sc.session_interval)
        for i in range(sc.sessions):
            self._schedule(i * interval, ("start", i), None)
        horizon = (sc.sessions - 1) * interval + 10 * NS
        for k in range(1, horizon // TICK_NS + 1):
            self._schedule(k * TICK_NS, "server", Tick())

        while self._queue:
            self.now_ns, _, target, event = heapq.heappop(self._queue)
            if target == "server":
                self._server_step(event)
            elif target[0] == "start":
                self._start_session(target[1])
            else:
                self._client_step(target[1], event)

        client_counters: Dict[str, int] = {}
        for client in self.clients:
            for key, value in client.metrics.items():
                client_counters[key] = client_counters.get(key, 0) + value
        return RunMetrics(sc, self.results, self.loss_log, dict(self.server.counters), client_counters)

    def _start_session(self, i: int) -> None:
        sc = self.scenario
        protocol = sc.protocol
        if protocol == Protocol.AUTO:
            known = self.cache.lookup(SERVER_DOMAIN, self.now_ns / NS)
            protocol = Protocol.TURBO if known else Protocol.VANILLA
        config = replace(sc.client, turbo=protocol == Protocol.TURBO)
        conn_id = self.rng.randbytes(CONN_ID_SIZE)
        engine = mock_engine(sc.suite, seed=sc.link.seed * 1_000_003 + i)
        client = ClientState(config, engine, conn_id)
        self.clients.append(client)
        self.results.append(SessionResult(i, conn_id, protocol.value, start_ns=self.now_ns))
        self._client_actions(i, client.start(self.now_ns / NS))

    def _client_step(self, i: int, event: object) -> None:
        client = self.clients[i]
        if client.phase.value == "failed":
            return
        self._client_actions(i, client.handle(event, self.now_ns / NS))

    def _client_actions(self, i: int, actions: List[object]) -> None:
        ow = _ns(self.scenario.link.one_way_delay)
        peer = (f"client-{i}", 0)
        result = self.results[i]
        for action in actions:
            if isinstance(action, SendUdpDatagrams):
                for d in action.datagrams:
                    self._send_udp(i, "c2s", d, "server", UdpDatagram(d, peer))
            elif isinstance(action, OpenTcp):
                self._schedule(self.now_ns + ow, "server", TcpAccepted(i, peer))
                self._schedule(self.now_ns + 2 * ow, ("client", i), TcpConnected())
            elif isinstance(action, SendTcpBytes):
                self._schedule(self.now_ns + ow, "server", TcpBytes(action.data, i))
            elif isinstance(action, CloseTcp):
                self._schedule(self.now_ns + ow, "server", TcpClosed(i))
            elif isinstance(action, SetTimer):
                self._schedule(self.now_ns + _ns(action.delay), ("client", i), Timer(action.tag))
            elif isinstance(action, DeliverEvent):
                obs = action.observable
                if isinstance(obs, Established):
                    result.established_ns = self.now_ns
                    result.path = obs.path
                    result.finish_flights += 1
                elif isinstance(obs, AppData) and result.first_response_ns is None:
                    result.first_response_ns = self.now_ns
                elif isinstance(obs, SessionFailed):
                    result.failed = True

    def _server_step(self, event: object) -> None:
        before = self.server.counters["engine_invocations"]
        actions = self.server.handle(event, self.now_ns / NS)
        key = self._event_key(event)
        if self.server.counters["engine_invocations"] > before and key is not None:
            self._ready_at[key] = self.now_ns + _ns(self.scenario.suite.compute)
        send_at = max(self.now_ns, self._ready_at.get(key, 0)) if key is not None else self.now_ns
        ow = _ns(self.scenario.link.one_way_delay)
        for action in actions:
            if isinstance(action, SendUdpDatagrams):
                i = int(action.peer[0].split("-")[1])
                for d in action.datagrams:
                    saved, self.now_ns = self.now_ns, send_at
                    self._send_udp(i, "s2c", d, ("client", i), UdpDatagram(d))
                    self.now_ns = saved
            elif isinstance(action, SendTcpBytes):
                self._schedule(send_at + ow, ("client", action.stream), TcpBytes(action.data))
            elif isinstance(action, CloseTcp):
                self._schedule(self.now_ns + ow, ("client", action.stream), TcpFailed(action.reason))

    @staticmethod
    def _event_key(event: object) -> Optional[object]:
        if isinstance(event, UdpDatagram) and len(event.data) >= HEADER_SIZE:
            return bytes(event.data[2:HEADER_SIZE - 8])
        if isinstance(event, TcpBytes):
            return ("tcp", event.stream)
        return None


def run_scenario(scenario: Scenario) -> RunMetrics:
    return Simulator(scenario).run()


def compare(
    protocol_a: Protocol, protocol_b: Protocol, scenario_base: Scenario
) -> Dict[str, float]:
    """Per-percentile ratio of ``protocol_a`` latency over ``protocol_b``, same seeds."""
    run_a = run_scenario(replace(scenario_base, protocol=protocol_a))
    run_b = run_scenario(replace(scenario_base, protocol=protocol_b))
    ratios = {}
    for name, a in run_a.percentiles.items():
        b = run_b.percentiles[name]
        ratios[name] = 1.0 if a == b else (a / b if b else math.inf)
    return ratios
