"""Frame codec, call-number allocation and reliable delivery bookkeeping.

Full frame, big-endian::

    0-1   F=1 | source call (15 bits)
    2-3   R   | destination call (15 bits)
    4-7   timestamp (ms)
    8     outbound sequence number
    9     inbound sequence number
    10    frame class, always 0x06
    11    message kind
    12-   information elements: id (1 byte), length (1 byte), data

Mini frame: ``F=0 | source call``, 16-bit timestamp, opaque payload.
"""
from __future__ import annotations

import enum
import functools
import heapq
import ipaddress
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .errors import (
    CallNumberExhausted,
    EncodeError,
    FrameError,
    IEOverrunError,
    TruncatedHeaderError,
    UnknownKindError,
)

IAX_PORT = 4569
FRAME_CLASS = 0x06
MAX_CALL = 0x7FFF
FULL_HEADER = struct.Struct(">HHIBBBB")
MINI_HEADER = struct.Struct(">HH")


class MessageKind(enum.IntEnum):
    NEW = 0x01
    PING = 0x02
    PONG = 0x03
    ACK = 0x04
    HANGUP = 0x05
    ACCEPT = 0x07
    ANSWER = 0x08
    REGREQ = 0x0D
    REGAUTH = 0x0E
    REGACK = 0x0F
    REGREJ = 0x10
    REGREL = 0x11
    FIND_CALLEES = 0x20
    FIND_CALLEE = 0x21
    REPLY_CONTACTS = 0x22
    REPLY_CALLEE = 0x23


_KINDS = {k.value: k for k in MessageKind}


class IE(enum.IntEnum):
    PEER_ID = 0x01  # sender's id
    ENDPOINT = 0x02
    ADDRESS = 0x03
    CONTACT_LIST = 0x04  # 1-byte id width, then fixed-width records
    TARGET_KEY = 0x05
    CAUSE = 0x06
    FLOOD_ID = 0x07
    HOP_COUNT = 0x08
    SUBJECT = 0x09  # one contact record: the joining or releasing peer
    AUTH = 0x0A
    AUTH_METHODS = 0x0B


# Which replies settle an outstanding request of a given kind.
RESPONSES = {
    MessageKind.REGREQ: {MessageKind.REGACK, MessageKind.REGREJ, MessageKind.REGAUTH},
    MessageKind.REGREL: {MessageKind.REGACK},
    MessageKind.FIND_CALLEES: {MessageKind.REPLY_CONTACTS},
    MessageKind.FIND_CALLEE: {MessageKind.REPLY_CONTACTS, MessageKind.REPLY_CALLEE},
    MessageKind.PING: {MessageKind.PONG},
    MessageKind.NEW: {MessageKind.ACCEPT, MessageKind.HANGUP},
}


def settles(request: MessageKind, reply: MessageKind) -> bool:
    return reply == MessageKind.ACK or reply in RESPONSES.get(request, ())


class InformationElement(NamedTuple):
    ie_id: int
    data: bytes


@dataclass(frozen=True)
class FullFrame:
    source_call: int
    dest_call: int
    kind: MessageKind
    timestamp_ms: int = 0
    oseqno: int = 0
    iseqno: int = 0
    retransmission: bool = False
    body: tuple = ()

    def ie(self, ie_id: int) -> bytes | None:
        for item in self.body:
            if item.ie_id == ie_id:
                return item.data
        return None

    def ies(self, ie_id: int) -> list[bytes]:
        return [item.data for item in self.body if item.ie_id == ie_id]


@dataclass(frozen=True)
class MiniFrame:
    source_call: int
    timestamp_low: int
    payload: bytes = b""


def encode_frame(frame: FullFrame | MiniFrame) -> bytes:
    if isinstance(frame, MiniFrame):
        if not 0 <= frame.source_call <= MAX_CALL:
            raise EncodeError("source call out of range")
        if not 0 <= frame.timestamp_low <= 0xFFFF:
            raise EncodeError("mini frame timestamp out of range")
        return MINI_HEADER.pack(frame.source_call, frame.timestamp_low) + bytes(frame.payload)

    if not (0 <= frame.source_call <= MAX_CALL and 0 <= frame.dest_call <= MAX_CALL):
        raise EncodeError("call number out of range")
    if not 0 <= frame.timestamp_ms <= 0xFFFFFFFF:
        raise EncodeError("timestamp out of range")
    if not (0 <= frame.oseqno <= 0xFF and 0 <= frame.iseqno <= 0xFF):
        raise EncodeError("sequence number out of range")
    parts = [
        FULL_HEADER.pack(
            0x8000 | frame.source_call,
            (0x8000 if frame.retransmission else 0) | frame.dest_call,
            frame.timestamp_ms,
            frame.oseqno,
            frame.iseqno,
            FRAME_CLASS,
            int(frame.kind),
        )
    ]
    for ie_id, data in frame.body:
        if len(data) > 255:
            raise EncodeError(f"IE 0x{ie_id:02x} carries {len(data)} > 255 bytes")
        if not 0 <= ie_id <= 0xFF:
            raise EncodeError("IE id out of range")
        parts.append(bytes((ie_id, len(data))))
        parts.append(data)
    return b"".join(parts)


def decode_frame(data: bytes) -> FullFrame | MiniFrame:
    if len(data) < 2:
        raise TruncatedHeaderError(f"{len(data)} bytes is shorter than any header")
    if not data[0] & 0x80:
        if len(data) < MINI_HEADER.size:
            raise TruncatedHeaderError("mini frame header needs 4 bytes")
        call, ts = MINI_HEADER.unpack_from(data)
        return MiniFrame(call, ts, bytes(data[4:]))

    if len(data) < FULL_HEADER.size:
        raise TruncatedHeaderError(f"full frame header needs 12 bytes, got {len(data)}")
    src, dst, ts, oseq, iseq, fclass, code = FULL_HEADER.unpack_from(data)
    if fclass != FRAME_CLASS:
        raise FrameError(f"unexpected frame class 0x{fclass:02x}")
    kind = _KINDS.get(code)
    if kind is None:
        raise UnknownKindError(f"unknown message kind 0x{code:02x}")
    body = []
    pos, end = FULL_HEADER.size, len(data)
    while pos < end:
        if pos + 2 > end:
            raise IEOverrunError(f"IE header truncated at offset {pos}")
        ie_id, length = data[pos], data[pos + 1]
        pos += 2
        if pos + length > end:
            raise IEOverrunError(f"IE 0x{ie_id:02x} declares {length} bytes past end of frame")
        body.append(InformationElement(ie_id, bytes(data[pos:pos + length])))
        pos += length
    return FullFrame(
        source_call=src & MAX_CALL,
        dest_call=dst & MAX_CALL,
        kind=kind,
        timestamp_ms=ts,
        oseqno=oseq,
        iseqno=iseq,
        retransmission=bool(dst & 0x8000),
        body=tuple(body),
    )


def mark_retransmission(data: bytes) -> bytes:
    """Set the R bit of an encoded full frame, leaving every other byte alone."""
    return data[:2] + bytes((data[2] | 0x80,)) + data[3:]


# --- information element payloads -------------------------------------------------

@functools.lru_cache(maxsize=65536)
def encode_endpoint(endpoint) -> bytes:
    host, port = endpoint
    return ipaddress.IPv4Address(host).packed + port.to_bytes(2, "big")


@functools.lru_cache(maxsize=65536)
def decode_endpoint(data: bytes):
    if len(data) != 6:
        raise FrameError(f"endpoint must be 6 bytes, got {len(data)}")
    return str(ipaddress.IPv4Address(data[:4])), int.from_bytes(data[4:], "big")


def encode_record(peer_id: int, endpoint, id_bytes: int) -> bytes:
    return peer_id.to_bytes(id_bytes, "big") + encode_endpoint(endpoint)


def decode_record(data: bytes):
    if len(data) < 7:
        raise FrameError("contact record too short")
    return int.from_bytes(data[:-6], "big"), decode_endpoint(data[-6:])


def contact_list_ies(records, id_bytes: int) -> list[InformationElement]:
    """Pack ``(peer_id, endpoint)`` pairs into as many CONTACT_LIST IEs as needed."""
    width = id_bytes + 6
    per_ie = 254 // width
    if per_ie < 1:
        raise EncodeError("contact record wider than an IE")
    records = list(records)
    out = []
    for start in range(0, len(records), per_ie):
        chunk = records[start:start + per_ie]
        data = bytes((id_bytes,)) + b"".join(encode_record(p, e, id_bytes) for p, e in chunk)
        out.append(InformationElement(IE.CONTACT_LIST, data))
    return out


def decode_contact_lists(frame: FullFrame) -> list[tuple]:
    out = []
    for data in frame.ies(IE.CONTACT_LIST):
        if not data:
            raise FrameError("empty CONTACT_LIST")
        width = data[0] + 6
        body = data[1:]
        if len(body) % width:
            raise FrameError("CONTACT_LIST length is not a multiple of the record width")
        for pos in range(0, len(body), width):
            out.append(decode_record(body[pos:pos + width]))
    return out


def uint_ie(ie_id: int, value: int, width: int) -> InformationElement:
    return InformationElement(ie_id, value.to_bytes(width, "big"))


def read_uint(frame: FullFrame, ie_id: int) -> int | None:
    data = frame.ie(ie_id)
    return None if data is None else int.from_bytes(data, "big")


# --- call numbers -----------------------------------------------------------------

class CallNumberAllocator:
    """Lowest-free allocation of 15-bit source call numbers."""

    def __init__(self):
        self.active: set[int] = set()

    def allocate(self) -> int:
        if len(self.active) >= MAX_CALL:
            raise CallNumberExhausted("all 32767 call numbers are in use")
        n = 1
        while n in self.active:
            n += 1
        self.active.add(n)
        return n

    def release(self, number: int):
        self.active.discard(number)


def allocate_call_number(active) -> int:
    """Lowest call number in ``[1, 32767]`` not present in ``active``."""
    if len(active) >= MAX_CALL:
        raise CallNumberExhausted("all 32767 call numbers are in use")
    n = 1
    while n in active:
        n += 1
    return n


# --- timers and retransmission ----------------------------------------------------

class TimerQueue:
    """Deadline-ordered callbacks; ties fire in timer-id order."""

    def __init__(self):
        self._heap: list[tuple[int, int]] = []
        self._callbacks: dict[int, Callable[[int], None]] = {}
        self._next_id = 0

    def schedule(self, deadline: int, callback: Callable[[int], None]) -> int:
        self._next_id += 1
        tid = self._next_id
        self._callbacks[tid] = callback
        heapq.heappush(self._heap, (deadline, tid))
        return tid

    def cancel(self, tid: int | None):
        if tid is not None:
            self._callbacks.pop(tid, None)

    def next_deadline(self) -> int | None:
        while self._heap and self._heap[0][1] not in self._callbacks:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def fire_due(self, now: int) -> int:
        fired = 0
        while self._heap and self._heap[0][0] <= now:
            _, tid = heapq.heappop(self._heap)
            callback = self._callbacks.pop(tid, None)
            if callback is not None:
                callback(now)
                fired += 1
        return fired

    def __len__(self):
        return len(self._callbacks)


@dataclass
class DeliveryHandle:
    """One reliably-sent full frame awaiting acknowledgment."""

    key: tuple
    kind: MessageKind
    data: bytes
    dest: tuple
    on_ack: Callable | None = None
    on_timeout: Callable | None = None
    attempts: int = 1
    timer: int | None = None
    state: str = "pending"  # pending | acked | timed_out | cancelled
    transmissions: list = field(default_factory=list)


class RetransmitQueue:
    """Retransmission schedule for reliable control frames.

    A frame is resent with the R bit set after ``initial_ms``, then after
    doubling intervals, up to ``retries`` times. The attempt after the last
    retry elapses reports a timeout.
    """

    def __init__(self, timers: TimerQueue, transmit: Callable[[tuple, bytes], None],
                 initial_ms: int = 500, retries: int = 4):
        self.timers = timers
        self.transmit = transmit
        self.initial_ms = initial_ms
        self.retries = retries
        self.pending: dict[tuple, DeliveryHandle] = {}

    def send(self, frame: FullFrame, dest, now: int, on_ack=None, on_timeout=None) -> DeliveryHandle:
        data = encode_frame(frame)
        key = (dest, frame.source_call, frame.oseqno)
        old = self.pending.pop(key, None)
        if old is not None:
            self._finish(old, "cancelled")
        handle = DeliveryHandle(key, frame.kind, data, dest, on_ack, on_timeout)
        self.pending[key] = handle
        self.transmit(dest, data)
        handle.transmissions.append(now)
        self._arm(handle, now)
        return handle

    def _arm(self, handle: DeliveryHandle, now: int):
        delay = self.initial_ms << (handle.attempts - 1)
        handle.timer = self.timers.schedule(now + delay, lambda t, h=handle: self._expire(h, t))

    def _expire(self, handle: DeliveryHandle, now: int):
        if handle.state != "pending":
            return
        if handle.attempts > self.retries:
            self.pending.pop(handle.key, None)
            self._finish(handle, "timed_out")
            if handle.on_timeout:
                handle.on_timeout(handle, now)
            return
        handle.attempts += 1
        self.transmit(handle.dest, mark_retransmission(handle.data))
        handle.transmissions.append(now)
        self._arm(handle, now)

    def _finish(self, handle: DeliveryHandle, state: str):
        handle.state = state
        self.timers.cancel(handle.timer)
        handle.timer = None

    def acknowledge(self, src, frame: FullFrame, now: int) -> DeliveryHandle | None:
        """Settle the pending frame ``frame`` answers, if any."""
        handle = self.pending.get((src, frame.dest_call, frame.iseqno))
        if handle is None or not settles(handle.kind, frame.kind):
            return None
        del self.pending[handle.key]
        self._finish(handle, "acked")
        if handle.on_ack:
            handle.on_ack(handle, frame, now)
        return handle

    def cancel(self, handle: DeliveryHandle | None):
        if handle is None or handle.state != "pending":
            return
        self.pending.pop(handle.key, None)
        self._finish(handle, "cancelled")

    def cancel_all(self):
        for handle in list(self.pending.values()):
            self.cancel(handle)
