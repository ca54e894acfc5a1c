"""
Request-based fragmentation.

The client splits its first flight into CH_FRAG datagrams and tops the flight
up with empty PAD_REQ datagrams, so that the server can fit its whole response
while sending exactly one datagram per request it received.
"""

from dataclasses import dataclass
from typing import List

from .wire import HEADER_SIZE, FragmentHeader, FragType, encode_fragment

DEFAULT_DATAGRAM_BUDGET = 1472
DEFAULT_PAD_MARGIN = 1


class BudgetTooSmall(ValueError):
    pass


def payload_capacity(datagram_budget: int) -> int:
    if datagram_budget <= HEADER_SIZE:
        raise BudgetTooSmall(
            f"datagram budget {datagram_budget} leaves no room after "
            f"the {HEADER_SIZE}-byte header"
        )
    return datagram_budget - HEADER_SIZE


def fragment_message(
    message: bytes,
    conn_id: bytes,
    frag_type: FragType,
    datagram_budget: int = DEFAULT_DATAGRAM_BUDGET,
) -> List[bytes]:
    capacity = payload_capacity(datagram_budget)
    if not message:
        raise ValueError("cannot fragment an empty message")
    if frag_type == FragType.PAD_REQ:
        raise ValueError("pad requests carry no message")
    total = len(message)
    return [
        encode_fragment(
            FragmentHeader(frag_type, conn_id, total, offset),
            message[offset : offset + capacity],
        )
        for offset in range(0, total, capacity)
    ]


def predict_response_fragments(
    estimated_response_len: int, datagram_budget: int = DEFAULT_DATAGRAM_BUDGET
) -> int:
    capacity = payload_capacity(datagram_budget)
    if estimated_response_len <= 0:
        raise ValueError("response estimate must be positive")
    return -(-estimated_response_len // capacity)


@dataclass(frozen=True)
class FragmentPlan:
    ch_fragments: List[bytes]
    pad_requests: List[bytes]
    predicted_response_fragments: int

    @property
    def datagrams(self) -> List[bytes]:
        return self.ch_fragments + self.pad_requests

    @property
    def total_requests(self) -> int:
        return len(self.ch_fragments) + len(self.pad_requests)

    @property
    def request_bytes(self) -> int:
        return sum(len(d) for d in self.datagrams)


def plan_request_flight(
    client_hello: bytes,
    conn_id: bytes,
    datagram_budget: int = DEFAULT_DATAGRAM_BUDGET,
    estimated_response_len: int = 1,
    pad_margin: int = DEFAULT_PAD_MARGIN,
) -> FragmentPlan:
    if pad_margin < 0:
        raise ValueError("pad margin must be non-negative")
    ch_fragments = fragment_message(
        client_hello, conn_id, FragType.CH_FRAG, datagram_budget
    )
    predicted = predict_response_fragments(estimated_response_len, datagram_budget)
    pad_count = max(0, predicted - len(ch_fragments)) + pad_margin
    pads = [
        encode_fragment(FragmentHeader(FragType.PAD_REQ, conn_id, 0, index))
        for index in range(pad_count)
    ]
    plan = FragmentPlan(ch_fragments, pads, predicted)
    assert plan.total_requests >= predicted
    return plan
