import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turbotls.events import (
    AppData,
    CloseTcp,
    DeliverEvent,
    Established,
    SendTcpBytes,
    SendUdpDatagrams,
    TcpAccepted,
    TcpBytes,
    Tick,
    UdpDatagram,
)
from turbotls.fragment import plan_request_flight
from turbotls.handshake import PQ_SUITE, mock_engine
from turbotls.reassembly import BufferConfig
from turbotls.server import ServerConfig, ServerState, amplification_report, server_step
from turbotls.wire import FragmentHeader, FragType, decode_fragment, encode_fragment, encode_tcp_preface

CID = b"C" * 12
PEER = ("10.0.0.1", 5000)


def new_server(**kw):
    counter = iter(range(1000, 10**9))
    return ServerState(lambda: mock_engine(PQ_SUITE, next(counter)), ServerConfig(**kw))


def pq_flight(cid=CID, seed=1):
    client = mock_engine(PQ_SUITE, seed)
    hello = client.client_first_flight()
    plan = plan_request_flight(hello, cid, estimated_response_len=client.response_size_bound())
    return client, plan


def udp_out(actions):
    return [d for a in actions if isinstance(a, SendUdpDatagrams) for d in a.datagrams]


def feed(server, datagrams, now=0.0, peer=PEER):
    out = []
    for d in datagrams:
        _, actions = server_step(server, UdpDatagram(d, peer), now)
        out += udp_out(actions)
    return out


def test_four_requests_three_responses():
    server = new_server()
    client, plan = pq_flight()
    assert plan.total_requests == 4
    out = feed(server, plan.datagrams)
    assert len(out) == 3
    headers = [decode_fragment(d)[0] for d in out]
    assert all(h.frag_type == FragType.RESP_FRAG and h.conn_id == CID for h in headers)
    assert server.counters["engine_invocations"] == 1
    report = amplification_report(server)
    assert (report["udp_pkts_out"], report["udp_pkts_in"]) == (3, 4)


def test_pads_before_hello_release_everything_on_completion():
    server = new_server()
    _, plan = pq_flight()
    out = feed(server, plan.pad_requests + plan.ch_fragments)
    assert len(out) == 3


def test_lost_requests_limit_responses():
    server = new_server()
    _, plan = pq_flight()
    # both ClientHello fragments arrive, both pads are lost
    out = feed(server, plan.ch_fragments)
    assert len(out) == 2
    assert server.sessions[CID].fragments_sent == 2


def test_late_pad_releases_one_more_fragment():
    server = new_server()
    _, plan = pq_flight()
    feed(server, plan.ch_fragments)
    out = feed(server, plan.pad_requests[:1])
    assert len(out) == 1
    assert feed(server, plan.pad_requests[1:]) == []


def test_responses_go_to_latest_source():
    server = new_server()
    _, plan = pq_flight()
    feed(server, plan.ch_fragments, peer=("a", 1))
    _, actions = server_step(server, UdpDatagram(plan.pad_requests[0], ("b", 2)), 0.0)
    assert actions[0].peer == ("b", 2)


def test_spoofed_flood_never_reaches_engine():
    server = new_server(buffer=BufferConfig(max_total_bytes=1 << 20))
    rng = random.Random(5)
    for _ in range(10_000):
        header = FragmentHeader(FragType.CH_FRAG, rng.randbytes(12), rng.randint(2, 65536), 0)
        server_step(server, UdpDatagram(encode_fragment(header, b"x"), PEER), 0.0)
        assert server.buffer.memory_in_use() <= 1 << 20
    assert server.counters["engine_invocations"] == 0
    assert server.counters["udp_pkts_out"] == 0


def test_garbage_hello_gets_no_response():
    server = new_server()
    header = FragmentHeader(FragType.CH_FRAG, CID, 50, 0)
    assert feed(server, [encode_fragment(header, bytes(50))]) == []
    assert server.counters["rejected"] == 1


def turbo_tcp(server, client, app=b"hello"):
    finish = client.client_finish(client_response(server))
    server_step(server, TcpAccepted("s1", PEER), 0.1)
    _, actions = server_step(server, TcpBytes(encode_tcp_preface(CID) + finish + app, "s1"), 0.1)
    return actions


def client_response(server):
    frags = server.sessions[CID].response_fragments
    return b"".join(decode_fragment(d)[1] for d in frags)


def test_turbo_attach_establishes_and_echoes():
    server = new_server()
    client, plan = pq_flight()
    feed(server, plan.datagrams)
    actions = turbo_tcp(server, client)
    established = [a.observable for a in actions if isinstance(a, DeliverEvent)]
    assert established[0] == Established("turbo", CID, "s1")
    assert established[1] == AppData(b"hello", "s1")
    assert SendTcpBytes(b"hello", "s1") in actions
    assert server.counters["established_turbo"] == 1
    # UDP state is handed over to the stream
    assert CID not in server.sessions


def test_preface_split_across_segments():
    server = new_server()
    client, plan = pq_flight()
    feed(server, plan.datagrams)
    finish = client.client_finish(client_response(server))
    data = encode_tcp_preface(CID) + finish + b"x"
    server_step(server, TcpAccepted("s1"), 0.1)
    actions = []
    for i in range(len(data)):
        actions += server_step(server, TcpBytes(data[i : i + 1], "s1"), 0.1)[1]
    assert server.counters["established_turbo"] == 1
    assert [a for a in actions if isinstance(a, SendTcpBytes)] == [SendTcpBytes(b"x", "s1")]


def test_unknown_conn_id_preface_closes():
    server = new_server()
    server_step(server, TcpAccepted("s1"), 0.0)
    _, actions = server_step(server, TcpBytes(encode_tcp_preface(b"Z" * 12), "s1"), 0.0)
    assert any(isinstance(a, CloseTcp) for a in actions)
    assert server.counters["unknown_conn_id"] == 1


def test_bad_magic_closes():
    server = new_server()
    _, actions = server_step(server, TcpBytes(b"TTLX", "s1"), 0.0)
    assert any(isinstance(a, CloseTcp) for a in actions)


def test_tampered_finish_closes():
    server = new_server()
    client, plan = pq_flight()
    feed(server, plan.datagrams)
    finish = bytearray(client.client_finish(client_response(server)))
    finish[-1] ^= 1
    _, actions = server_step(server, TcpBytes(encode_tcp_preface(CID) + bytes(finish), "s1"), 0.1)
    assert any(isinstance(a, CloseTcp) for a in actions)
    assert server.counters["established_turbo"] == 0


def test_vanilla_client_unchanged():
    server = new_server()
    client = mock_engine(PQ_SUITE, 42)
    server_step(server, TcpAccepted("v"), 0.0)
    _, actions = server_step(server, TcpBytes(client.client_first_flight(), "v"), 0.0)
    (response,) = [a.data for a in actions if isinstance(a, SendTcpBytes)]
    _, actions = server_step(server, TcpBytes(client.client_finish(response) + b"app", "v"), 0.1)
    assert DeliverEvent(Established("vanilla", None, "v")) in actions
    assert SendTcpBytes(b"app", "v") in actions
    assert server.counters["established_vanilla"] == 1
    assert server.counters["udp_pkts_in"] == 0


def test_admission_hook_suppresses_engine():
    server = new_server(admit_client_hello=lambda cid, now: False)
    _, plan = pq_flight()
    assert feed(server, plan.datagrams) == []
    assert server.counters["engine_invocations"] == 0


def test_session_limit():
    server = new_server(max_sessions=1)
    _, a = pq_flight(b"a" * 12)
    _, b = pq_flight(b"b" * 12, seed=2)
    assert len(feed(server, a.datagrams)) == 3
    assert feed(server, b.datagrams) == []


@pytest.mark.parametrize("now, remaining", [(1.999, 1), (2.001, 0)])
def test_tick_evicts_partial_and_sessions(now, remaining):
    server = new_server()
    _, plan = pq_flight()
    feed(server, plan.ch_fragments[:1], now=0.0)
    _, other = pq_flight(b"o" * 12, seed=3)
    feed(server, other.datagrams, now=0.0)
    server_step(server, Tick(), now)
    assert len(server.buffer) == remaining
    assert len(server.sessions) == remaining


datagram = st.one_of(
    st.binary(max_size=64),
    # raw packing skips the encoder's validation
    st.builds(
        lambda kind, cid, total, off, payload: struct.pack("!BB12sII", 1, kind, cid, total, off)
        + payload,
        st.integers(0, 4),
        st.sampled_from([b"a" * 12, b"b" * 12]),
        st.integers(0, 3000),
        st.integers(0, 3000),
        st.binary(max_size=200),
    ),
)


@settings(max_examples=200, deadline=None)
@given(st.lists(datagram, max_size=40), st.data())
def test_packet_amplification_never_exceeds_one(noise, data):
    server = new_server()
    _, plan = pq_flight(b"a" * 12)
    stream = data.draw(st.permutations(noise + plan.datagrams))
    for d in stream:
        server_step(server, UdpDatagram(d, PEER), 0.0)
        assert server.counters["udp_pkts_out"] <= server.counters["udp_pkts_in"]
    for session in server.sessions.values():
        assert session.fragments_sent <= session.requests_seen
