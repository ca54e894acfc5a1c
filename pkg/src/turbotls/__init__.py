"""TurboTLS: TLS handshake delivery over UDP raced against TCP, with TCP fallback."""

from .client import ClientConfig, ClientState, Phase, client_start, client_step
from .fragment import FragmentPlan, fragment_message, plan_request_flight, predict_response_fragments
from .handshake import EC_SUITE, PQ_SUITE, MockSuite, mock_engine
from .netsim import LinkModel, Protocol, RunMetrics, Scenario, compare, run_scenario
from .reassembly import BufferConfig, ReassemblyBuffer
from .server import ServerConfig, ServerState, server_step
from .wire import FragmentHeader, FragType, decode_fragment, decode_tcp_preface, encode_fragment, encode_tcp_preface

__version__ = "0.1.0"

__all__ = [
    "BufferConfig",
    "ClientConfig",
    "ClientState",
    "EC_SUITE",
    "FragmentHeader",
    "FragmentPlan",
    "FragType",
    "LinkModel",
    "MockSuite",
    "PQ_SUITE",
    "Phase",
    "Protocol",
    "ReassemblyBuffer",
    "RunMetrics",
    "Scenario",
    "ServerConfig",
    "ServerState",
    "client_start",
    "client_step",
    "compare",
    "decode_fragment",
    "decode_tcp_preface",
    "encode_fragment",
    "encode_tcp_preface",
    "fragment_message",
    "mock_engine",
    "plan_request_flight",
    "predict_response_fragments",
    "run_scenario",
    "server_step",
]
