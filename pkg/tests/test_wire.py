import json
import random
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from iaxkad.errors import (
    CallNumberExhausted,
    EncodeError,
    FrameError,
    IEOverrunError,
    TruncatedHeaderError,
    UnknownKindError,
)
from iaxkad.golden import golden_vectors
from iaxkad.wire import (
    IE,
    CallNumberAllocator,
    FullFrame,
    InformationElement,
    MessageKind,
    MiniFrame,
    RetransmitQueue,
    TimerQueue,
    allocate_call_number,
    contact_list_ies,
    decode_contact_lists,
    decode_frame,
    encode_frame,
    mark_retransmission,
    settles,
)

FIXTURES = Path(__file__).parent / "fixtures"


def test_golden_vectors_match_fixture():
    stored = json.loads((FIXTURES / "golden_frames.json").read_text())
    assert golden_vectors() == stored


def test_regack_layout_by_hand():
    f = FullFrame(5, 9, MessageKind.REGACK, 0, 0, 1)
    assert encode_frame(f) == bytes([0x80, 0x05, 0x00, 0x09, 0, 0, 0, 0, 0x00, 0x01, 0x06, 0x0F])


def test_mini_layout_by_hand():
    assert encode_frame(MiniFrame(5, 0x1234, b"ab")) == bytes([0x00, 0x05, 0x12, 0x34, 0x61, 0x62])


def test_retransmission_bit():
    data = encode_frame(FullFrame(5, 9, MessageKind.PING))
    again = mark_retransmission(data)
    assert again[2] & 0x80 and again[3:] == data[3:] and again[:2] == data[:2]
    assert decode_frame(again).retransmission
    assert decode_frame(again).dest_call == 9


def test_ie_round_trip():
    f = FullFrame(1, 2, MessageKind.FIND_CALLEES, 77, 3, 4, False,
                  (InformationElement(IE.TARGET_KEY, b"\x01" * 20), InformationElement(IE.CAUSE, b"")))
    back = decode_frame(encode_frame(f))
    assert back == f
    assert back.ie(IE.TARGET_KEY) == b"\x01" * 20
    assert back.ie(IE.AUTH) is None


@pytest.mark.parametrize("data, err", [
    (b"", TruncatedHeaderError),
    (b"\x00\x01\x02", TruncatedHeaderError),
    (b"\x80\x01\x00\x00\x00\x00\x00\x00\x00\x00\x06", TruncatedHeaderError),
    (b"\x80\x01\x00\x00\x00\x00\x00\x00\x00\x00\x06\x7f", UnknownKindError),
    (b"\x80\x01\x00\x00\x00\x00\x00\x00\x00\x00\x02\x02", FrameError),
    (b"\x80\x01\x00\x00\x00\x00\x00\x00\x00\x00\x06\x02\x09", IEOverrunError),
    (b"\x80\x01\x00\x00\x00\x00\x00\x00\x00\x00\x06\x02\x09\x05ab", IEOverrunError),
])
def test_decode_errors(data, err):
    with pytest.raises(err):
        decode_frame(data)


def test_encode_errors():
    with pytest.raises(EncodeError):
        encode_frame(FullFrame(0x8000, 0, MessageKind.PING))
    with pytest.raises(EncodeError):
        encode_frame(FullFrame(0, 0, MessageKind.PING, body=(InformationElement(1, b"x" * 256),)))
    with pytest.raises(EncodeError):
        encode_frame(MiniFrame(1, 0x10000))


def test_contact_list_spans_several_ies():
    records = [(i, ("10.0.0.%d" % (i + 1), 4569)) for i in range(20)]
    ies = contact_list_ies(records, 20)
    assert len(ies) == 3  # 26-byte records, 9 per IE
    assert all(len(x.data) <= 255 for x in ies)
    f = decode_frame(encode_frame(FullFrame(0, 0, MessageKind.REPLY_CONTACTS, body=tuple(ies))))
    assert decode_contact_lists(f) == records


def test_settles():
    assert settles(MessageKind.REGREQ, MessageKind.REGACK)
    assert settles(MessageKind.NEW, MessageKind.HANGUP)
    assert settles(MessageKind.ANSWER, MessageKind.ACK)
    assert not settles(MessageKind.PING, MessageKind.REGACK)


def test_call_numbers_lowest_free():
    a = CallNumberAllocator()
    assert [a.allocate() for _ in range(3)] == [1, 2, 3]
    a.release(2)
    assert a.allocate() == 2
    assert allocate_call_number({1, 2, 4}) == 3
    with pytest.raises(CallNumberExhausted):
        allocate_call_number(set(range(1, 0x8000)))


def test_timer_ties_fire_in_schedule_order():
    q = TimerQueue()
    fired = []
    q.schedule(10, lambda t: fired.append("a"))
    tid = q.schedule(10, lambda t: fired.append("b"))
    q.schedule(10, lambda t: fired.append("c"))
    q.cancel(tid)
    assert q.next_deadline() == 10
    assert q.fire_due(9) == 0
    assert q.fire_due(10) == 2
    assert fired == ["a", "c"]
    assert q.next_deadline() is None


def _drive(q, timers, until):
    for t in range(0, until + 1):
        timers.fire_due(t)


def test_retransmit_schedule_and_timeout():
    timers = TimerQueue()
    sent = []
    q = RetransmitQueue(timers, lambda dest, data: sent.append(data), 500, 4)
    outcome = []
    h = q.send(FullFrame(0, 0, MessageKind.PING, oseqno=7), ("10.0.0.2", 4569), 0,
               on_timeout=lambda h, t: outcome.append(t))
    _drive(q, timers, 20_000)
    assert h.transmissions == [0, 500, 1500, 3500, 7500]
    assert outcome == [15_500]
    assert h.state == "timed_out"
    assert not sent[0][2] & 0x80 and all(d[2] & 0x80 for d in sent[1:])


def test_retransmit_settled_by_matching_reply_only():
    timers = TimerQueue()
    q = RetransmitQueue(timers, lambda dest, data: None)
    dest = ("10.0.0.2", 4569)
    acked = []
    h = q.send(FullFrame(3, 0, MessageKind.PING, oseqno=7), dest, 0, on_ack=lambda *a: acked.append(1))
    assert q.acknowledge(dest, FullFrame(0, 3, MessageKind.PONG, iseqno=8), 10) is None
    assert q.acknowledge(("10.0.0.3", 4569), FullFrame(0, 3, MessageKind.PONG, iseqno=7), 10) is None
    assert q.acknowledge(dest, FullFrame(0, 3, MessageKind.REGACK, iseqno=7), 10) is None
    assert q.acknowledge(dest, FullFrame(0, 3, MessageKind.PONG, iseqno=7), 10) is h
    assert acked == [1] and h.state == "acked" and not q.pending
    assert timers.next_deadline() is None


frames = st.one_of(
    st.builds(MiniFrame, st.integers(0, 0x7FFF), st.integers(0, 0xFFFF), st.binary(max_size=64)),
    st.builds(
        FullFrame,
        st.integers(0, 0x7FFF), st.integers(0, 0x7FFF), st.sampled_from(list(MessageKind)),
        st.integers(0, 0xFFFFFFFF), st.integers(0, 255), st.integers(0, 255), st.booleans(),
        st.lists(st.builds(InformationElement, st.integers(0, 255), st.binary(max_size=255)),
                 max_size=4).map(tuple),
    ),
)


@given(frames)
def test_codec_round_trip_property(frame):
    data = encode_frame(frame)
    assert decode_frame(data) == frame
    assert encode_frame(decode_frame(data)) == data


def test_fuzzed_bytes_raise_only_frame_errors():
    rng = random.Random(99)
    for _ in range(5000):
        data = rng.randbytes(rng.randint(0, 40))
        if rng.random() < 0.5 and data:
            data = bytes([data[0] | 0x80]) + data[1:]
        try:
            decode_frame(data)
        except FrameError:
            pass
