"""Per-peer protocol state machine.

A :class:`PeerNode` never touches a socket or a clock. Every entry point takes
the current (simulated) time in milliseconds and queues outgoing datagrams,
which the host collects with :meth:`PeerNode.drain`. Timers are surfaced
through :meth:`PeerNode.next_deadline` and fired by :meth:`PeerNode.tick`.
"""
from __future__ import annotations

import bisect
import logging
import random
from dataclasses import dataclass, field
from typing import Callable

from .errors import AddressError, CallStateError, FrameError, SelfContactError
from .identity import KademliaParams, PeerId, derive_peer_id, normalize_address, random_peer_id
from .routing import Contact, RoutingTable
from .wire import (
    IE,
    CallNumberAllocator,
    FullFrame,
    InformationElement,
    MessageKind,
    MiniFrame,
    RetransmitQueue,
    TimerQueue,
    contact_list_ies,
    decode_contact_lists,
    decode_frame,
    decode_record,
    encode_frame,
    encode_record,
    read_uint,
    uint_ie,
)

log = logging.getLogger(__name__)

K = MessageKind

UNREGISTERED = "unregistered"
REGISTERING = "registering"
REGISTERED = "registered"
RELEASING = "releasing"
RELEASED = "released"

ROUND_TIMEOUT_MS = 2_000
HOP_LIMIT = 3
FLOOD_RETENTION_MS = 10 * 60_000
SWEEP_INTERVAL_MS = 60_000

CAUSE_IDENTITY = 1
CAUSE_AUTH = 2
CAUSE_NO_SUCH_USER = 3
CAUSE_NORMAL = 16
CAUSE_TEXT = {
    CAUSE_IDENTITY: "identity mismatch",
    CAUSE_AUTH: "authentication failed",
    CAUSE_NO_SUCH_USER: "no such user",
    CAUSE_NORMAL: "normal clearing",
}


class Completion:
    """Minimal single-shot future driven by the event loop."""

    def __init__(self):
        self.done = False
        self.value = None
        self.error: str | None = None
        self._callbacks: list[Callable] = []

    def resolve(self, value=None):
        if self.done:
            return
        self.done, self.value = True, value
        self._fire()

    def fail(self, error: str):
        if self.done:
            return
        self.done, self.error = True, error
        self._fire()

    @property
    def ok(self) -> bool:
        return self.done and self.error is None

    def add_callback(self, fn: Callable[["Completion"], None]):
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def _fire(self):
        callbacks, self._callbacks = self._callbacks, []
        for fn in callbacks:
            fn(self)


@dataclass
class LookupResult:
    target: PeerId
    contacts: list
    rounds: int
    messages: int
    queried: int
    found: Contact | None = None
    starved: bool = False


@dataclass
class LookupState:
    lookup_id: int
    target: PeerId
    mode: str  # callees | callee | register
    completion: Completion
    address: str | None = None
    searchlist: list = field(default_factory=list)  # (distance, peer_id, endpoint)
    members: set = field(default_factory=set)
    closest_neighbor: PeerId | None = None
    queried: set = field(default_factory=set)
    inflight: dict = field(default_factory=dict)  # peer_id -> DeliveryHandle
    responded_active: set = field(default_factory=set)
    failed: set = field(default_factory=set)
    rounds: int = 0
    messages: int = 0
    round_timer: int | None = None
    found: Contact | None = None
    acks: int = 0
    rejects: int = 0
    finished: bool = False
    # peer_id -> round number in which it was queried; used by invariant checks
    query_log: list = field(default_factory=list)
    round_best: list = field(default_factory=list)

    def known(self, peer_id: PeerId) -> bool:
        return peer_id in self.members

    def drop(self, peer_ids):
        self.searchlist = [e for e in self.searchlist if e[1] not in peer_ids]
        self.members.difference_update(peer_ids)

    def trim(self, k: int):
        for _, pid, _ in self.searchlist[k:]:
            self.members.discard(pid)
        del self.searchlist[k:]


@dataclass
class CallState:
    local_call: int
    peer: Contact
    role: str  # caller | callee
    remote_call: int | None = None
    phase: str = "initiating"  # initiating | ringing | up | hungup
    oseqno: int = 0
    media_frames_sent: int = 0
    media_frames_received: int = 0
    completion: Completion | None = None
    address: str | None = None


Outgoing = tuple  # (endpoint, bytes)


class PeerNode:
    def __init__(
        self,
        address: str,
        endpoint,
        params: KademliaParams | None = None,
        rng=None,
        peer_id: PeerId | None = None,
        bootstrap: bool = False,
        secret: bytes | None = None,
        hop_limit: int = HOP_LIMIT,
        retries: int = 4,
        initial_rto_ms: int = 500,
        round_timeout_ms: int = ROUND_TIMEOUT_MS,
    ):
        self.params = params or KademliaParams()
        self.address = normalize_address(address) if address else None
        self.endpoint = tuple(endpoint)
        self.rng = rng if rng is not None else random.Random()
        self.bootstrap = bootstrap
        self.secret = secret
        self.hop_limit = hop_limit
        self.round_timeout_ms = round_timeout_ms
        if peer_id is None and self.address is not None:
            peer_id = derive_peer_id(self.address, self.params)
        self.peer_id = peer_id
        self.table: RoutingTable | None = None
        if peer_id is not None:
            self.table = RoutingTable(peer_id, self.params)

        self.registration = UNREGISTERED
        self.now = 0
        self.outbox: list[Outgoing] = []
        self.timers = TimerQueue()
        self.rtx = RetransmitQueue(self.timers, self._transmit, initial_rto_ms, retries)
        self.calls = CallNumberAllocator()
        self.sessions: dict[int, CallState] = {}
        self._remote_index: dict[tuple, int] = {}
        self.lookups: dict[int, LookupState] = {}
        self._lookup_seq = 0
        self._seq: dict = {}
        self.seen_floods: dict[int, int] = {}
        self._sweep_timer: int | None = None
        self.stats: dict[str, int] = {}
        self.signals: list[tuple] = []
        self.finished_lookups: list[LookupResult] = []
        self.on_event: Callable | None = None
        self._join: dict | None = None

    # --- plumbing ---------------------------------------------------------------

    def _bump(self, key: str, n: int = 1):
        self.stats[key] = self.stats.get(key, 0) + n

    def _transmit(self, dest, data: bytes):
        self.outbox.append((dest, data))
        if data[0] & 0x80:
            self._bump("full_sent")
            if data[2] & 0x80:
                self._bump("retransmissions")
        else:
            self._bump("mini_sent")

    def drain(self) -> list[Outgoing]:
        out, self.outbox = self.outbox, []
        return out

    def next_deadline(self) -> int | None:
        return self.timers.next_deadline()

    def tick(self, now: int) -> list[Outgoing]:
        self.now = now
        self.timers.fire_due(now)
        return self.drain()

    def _signal(self, name: str, **data):
        self.signals.append((self.now, name, data))
        if self.on_event:
            self.on_event(self, name, data)

    @property
    def id_bytes(self) -> int:
        return self.params.id_bytes

    def _next_seq(self, key) -> int:
        n = self._seq.get(key, 0)
        self._seq[key] = (n + 1) & 0xFF
        return n

    def _ident(self) -> list:
        if self.registration in (RELEASING, RELEASED):
            return []
        return [InformationElement(IE.PEER_ID, self.peer_id.to_bytes(self.id_bytes, "big"))]

    def _self_record(self) -> bytes:
        return encode_record(self.peer_id, self.endpoint, self.id_bytes)

    def _frame(self, kind, dest, body=(), source_call=0, dest_call=0, oseqno=None, iseqno=0):
        if oseqno is None:
            oseqno = self._next_seq(dest)
        return FullFrame(
            source_call=source_call,
            dest_call=dest_call,
            kind=kind,
            timestamp_ms=self.now & 0xFFFFFFFF,
            oseqno=oseqno,
            iseqno=iseqno,
            body=tuple(self._ident()) + tuple(body),
        )

    def _request(self, kind, dest, body=(), on_ack=None, on_timeout=None):
        frame = self._frame(kind, dest, body)
        return self.rtx.send(frame, dest, self.now, on_ack, on_timeout)

    def _reply(self, kind, dest, request: FullFrame, body=(), reliable=False, on_ack=None):
        frame = self._frame(
            kind, dest, body, source_call=0, dest_call=request.source_call, iseqno=request.oseqno
        )
        if reliable:
            return self.rtx.send(frame, dest, self.now, on_ack)
        self._transmit(dest, encode_frame(frame))
        return None

    def _contacts_body(self, target: PeerId, exclude=()) -> list:
        picked = [
            (c.peer_id, c.endpoint)
            for c in self.table.closest_contacts(target, self.params.k + len(exclude))
            if c.peer_id not in exclude
        ][: self.params.k]
        return contact_list_ies(picked, self.id_bytes)

    def _observe(self, peer_id: PeerId, endpoint):
        if peer_id == self.peer_id or self.table is None:
            return
        self.table.observe_contact(Contact(peer_id, tuple(endpoint)), self.now)

    @property
    def active(self) -> bool:
        return self.registration in (REGISTERING, REGISTERED)

    # --- inbound ----------------------------------------------------------------

    def handle_datagram(self, data: bytes, src, now: int) -> list[Outgoing]:
        self.now = now
        src = tuple(src)
        try:
            frame = decode_frame(data)
        except FrameError as exc:
            self._bump("malformed")
            log.debug("%s dropped malformed frame from %s: %s", self.address, src, exc)
            return self.drain()
        if isinstance(frame, MiniFrame):
            self._on_media(frame, src)
        else:
            self._bump("full_received")
            self._on_full(frame, src)
        return self.drain()

    def _on_full(self, frame: FullFrame, src):
        kind = frame.kind
        if self.registration in (RELEASING, RELEASED):
            if kind == K.REGREL:
                self._reply(K.REGACK, src, frame)
            else:
                self.rtx.acknowledge(src, frame, self.now)
            return
        if self.registration == UNREGISTERED and kind not in (K.REGREL,):
            self.rtx.acknowledge(src, frame, self.now)
            return

        sender = read_uint(frame, IE.PEER_ID)
        if sender is not None and kind != K.REGREL:
            self._observe(sender, src)
        self.rtx.acknowledge(src, frame, self.now)
        handler = self._handlers.get(kind)
        if handler is not None:
            handler(self, frame, src)

    # --- registration -----------------------------------------------------------

    def join(self, now: int, first_contact: Contact | None = None) -> Completion:
        """Register into the overlay through ``first_contact``."""
        self.now = now
        done = Completion()
        if self.registration != UNREGISTERED:
            done.fail(f"cannot join from state {self.registration}")
            return done
        if self.peer_id is None:
            self.peer_id = random_peer_id(self.rng, self.params.bits)
        if self.table is None:
            self.table = RoutingTable(self.peer_id, self.params)
        self.registration = REGISTERING

        if first_contact is None:
            if self.bootstrap:
                self.registration = REGISTERED
                self._signal("registered")
                done.resolve(REGISTERED)
                return done
            self.registration = UNREGISTERED
            done.fail("no first contact")
            return done
        if first_contact.peer_id == self.peer_id:
            raise SelfContactError("first contact carries our own id")

        self.table.observe_contact(first_contact, now)
        flood_id = self.rng.getrandbits(64)
        self.seen_floods[flood_id] = now + FLOOD_RETENTION_MS
        self._arm_sweep()
        self._join = {"first": first_contact.peer_id, "flood": flood_id, "done": done,
                      "pings": 0, "started": now}
        st = self._new_lookup(self.peer_id, "register")
        st.completion.add_callback(self._registration_walk_done)
        self._start_lookup(st, seeds=[first_contact])
        return done

    def _regreq_body(self, flood_id: int, hop: int, with_auth: bool) -> list:
        body = [
            InformationElement(IE.SUBJECT, self._self_record()),
            InformationElement(IE.ADDRESS, self.address.encode()) if self.address else None,
            uint_ie(IE.FLOOD_ID, flood_id, 8),
            uint_ie(IE.HOP_COUNT, hop, 1),
        ]
        if with_auth and self.secret is not None:
            body.append(InformationElement(IE.AUTH, self.secret))
        return [ie for ie in body if ie is not None]

    def _registration_walk_done(self, c: Completion):
        join = self._join
        st: LookupState = c.value
        done = join["done"]
        if st.acks == 0:
            self.registration = UNREGISTERED
            self.table = RoutingTable(self.peer_id, self.params)
            self._join = None
            self._signal("join_failed", rejects=st.rejects)
            done.fail("rejected" if st.rejects else "timeout")
            return
        keys = self.table.refresh_targets(join["first"], self.rng)
        join["keys"] = keys
        for key in keys:
            picks = self.table.closest_contacts(key, 1)
            if not picks:
                continue
            join["pings"] += 1
            self._bump("refresh_pings")
            body = [uint_ie(IE.TARGET_KEY, key, self.id_bytes)]
            self._request(
                K.PING, picks[0].endpoint, body,
                on_ack=lambda h, f, t, key=key: self._refresh_pong(key, f),
                on_timeout=lambda h, t: self._refresh_step_done(),
            )
        if join["pings"] == 0:
            self._finish_join()

    def _refresh_pong(self, key: PeerId, frame: FullFrame):
        for pid, ep in decode_contact_lists(frame):
            self._observe(pid, ep)
        self._refresh_step_done()

    def _refresh_step_done(self):
        join = self._join
        if join is None:
            return
        join["pings"] -= 1
        if join["pings"] == 0:
            self._finish_join()

    def _finish_join(self):
        join, self._join = self._join, None
        self.registration = REGISTERED
        self._signal("registered", elapsed=self.now - join["started"])
        join["done"].resolve(REGISTERED)

    def _handle_regreq(self, frame: FullFrame, src):
        subject = frame.ie(IE.SUBJECT)
        if subject is None:
            return
        joiner_id, joiner_ep = decode_record(subject)
        address = frame.ie(IE.ADDRESS)
        if address is not None:
            try:
                expected = derive_peer_id(address.decode(), self.params)
            except (AddressError, UnicodeDecodeError):
                expected = None
            if expected != joiner_id:
                self._bump("regrej_sent")
                self._reply(K.REGREJ, src, frame, [uint_ie(IE.CAUSE, CAUSE_IDENTITY, 1)])
                return
        if self.secret is not None:
            auth = frame.ie(IE.AUTH)
            if auth is None:
                self._reply(K.REGAUTH, src, frame, [InformationElement(IE.AUTH_METHODS, b"plaintext")])
                return
            if auth != self.secret:
                self._reply(K.REGREJ, src, frame, [uint_ie(IE.CAUSE, CAUSE_AUTH, 1)])
                return
        if joiner_id == self.peer_id:
            return
        self._observe(joiner_id, joiner_ep)
        sender = read_uint(frame, IE.PEER_ID)
        self._reply(K.REGACK, src, frame, self._contacts_body(joiner_id, exclude={joiner_id}))

        flood_id = read_uint(frame, IE.FLOOD_ID)
        if flood_id is None or flood_id in self.seen_floods:
            return
        self.seen_floods[flood_id] = self.now + FLOOD_RETENTION_MS
        self._arm_sweep()
        own = joiner_id ^ self.peer_id
        hop = (read_uint(frame, IE.HOP_COUNT) or 0) + 1
        forwards = [
            c for c in self.table.closest_contacts(joiner_id, self.params.alpha + 2)
            if c.peer_id not in (joiner_id, sender) and (c.peer_id ^ joiner_id) < own
        ][: self.params.alpha]
        body = [
            InformationElement(IE.SUBJECT, subject),
            uint_ie(IE.FLOOD_ID, flood_id, 8),
            uint_ie(IE.HOP_COUNT, min(hop, 255), 1),
        ]
        if address is not None:
            body.insert(1, InformationElement(IE.ADDRESS, address))
        if frame.ie(IE.AUTH) is not None:
            body.append(InformationElement(IE.AUTH, frame.ie(IE.AUTH)))
        for c in forwards:
            self._bump("regreq_forwarded")
            self._request(K.REGREQ, c.endpoint, body)

    # --- iterative lookup -------------------------------------------------------

    def _new_lookup(self, target: PeerId, mode: str, address: str | None = None) -> LookupState:
        self._lookup_seq += 1
        st = LookupState(self._lookup_seq, target, mode, Completion(), address)
        self.lookups[st.lookup_id] = st
        return st

    def lookup_k_closest(self, target: PeerId, now: int) -> Completion:
        """Find the ``k`` live peers closest to ``target``; resolves to a LookupResult."""
        self.now = now
        if self.registration != REGISTERED:
            done = Completion()
            done.fail(f"not registered ({self.registration})")
            return done
        st = self._new_lookup(target, "callees")
        self._start_lookup(st)
        return st.completion

    def refresh(self, now: int) -> Completion:
        """Self-lookup that re-learns the neighbourhood around our own id."""
        return self.lookup_k_closest(self.peer_id, now)

    def resolve_callee(self, callee_address: str, now: int) -> Completion:
        """Locate the live peer owning ``callee_address``; LookupResult.found is None if absent."""
        self.now = now
        address = normalize_address(callee_address)
        if self.registration != REGISTERED:
            done = Completion()
            done.fail(f"not registered ({self.registration})")
            return done
        target = derive_peer_id(address, self.params)
        st = self._new_lookup(target, "callee", address)
        if target == self.peer_id:
            st.found = Contact(self.peer_id, self.endpoint, last_seen=now)
            self._finish_lookup(st)
            return st.completion
        self._start_lookup(st)
        return st.completion

    def _start_lookup(self, st: LookupState, seeds=None):
        if seeds is None:
            seeds = self.table.closest_contacts(st.target, self.params.alpha)
        for c in seeds:
            self._merge(st, c.peer_id, c.endpoint)
        if not seeds:
            self._signal("lookup_starved", target=st.target)
            self._finish_lookup(st, starved=True)
            return
        st.closest_neighbor = seeds[0].peer_id
        self._send_round(st, [(c.peer_id, c.endpoint) for c in seeds])

    def _merge(self, st: LookupState, peer_id: PeerId, endpoint):
        if peer_id == self.peer_id or peer_id in st.failed or st.known(peer_id):
            return
        bisect.insort(st.searchlist, (peer_id ^ st.target, peer_id, tuple(endpoint)))
        st.members.add(peer_id)

    def _query_body(self, st: LookupState, with_auth: bool = False) -> list:
        if st.mode == "register":
            return self._regreq_body(self._join["flood"], 0, with_auth)
        return [uint_ie(IE.TARGET_KEY, st.target, self.id_bytes)]

    def _query_kind(self, st: LookupState):
        return {"register": K.REGREQ, "callees": K.FIND_CALLEES, "callee": K.FIND_CALLEE}[st.mode]

    def _send_round(self, st: LookupState, picks):
        st.rounds += 1
        best = min((d for d, pid, _ in st.searchlist if pid in st.responded_active), default=None)
        st.round_best.append(best)
        kind, body = self._query_kind(st), self._query_body(st)
        for pid, ep in picks:
            st.queried.add(pid)
            st.query_log.append((st.rounds, pid))
            st.inflight[pid] = self._send_query(st, kind, body, pid, ep)
        st.round_timer = self.timers.schedule(
            self.now + self.round_timeout_ms, lambda t, st=st: self._round_timeout(st)
        )

    def _send_query(self, st, kind, body, pid, ep):
        return self.rtx.send(
            self._frame(kind, ep, body), ep, self.now,
            on_ack=lambda h, f, t, st=st, pid=pid: self._on_lookup_reply(st, pid, h, f),
        )

    def _on_lookup_reply(self, st: LookupState, pid: PeerId, handle, frame: FullFrame):
        if st.finished or pid not in st.inflight:
            return
        st.messages += handle.attempts
        if frame.kind == K.REGAUTH:
            if self.secret is not None and st.mode == "register":
                ep = handle.dest
                st.inflight[pid] = self._send_query(st, K.REGREQ, self._query_body(st, True), pid, ep)
                return
            frame_kind = K.REGREJ
        else:
            frame_kind = frame.kind
        del st.inflight[pid]

        if frame_kind == K.REGREJ:
            st.rejects += 1
            st.failed.add(pid)
            st.drop({pid})
        else:
            st.responded_active.add(pid)
            if frame_kind == K.REGACK:
                st.acks += 1
            if frame_kind == K.REPLY_CALLEE:
                rec = frame.ie(IE.SUBJECT)
                if rec is not None:
                    cid, cep = decode_record(rec)
                    if cid == st.target and pid == st.target:
                        st.found = Contact(cid, cep, last_seen=self.now)
                        self._finish_lookup(st)
                        return
                    if cid == st.target:
                        self._merge(st, cid, cep)
            for cid, cep in decode_contact_lists(frame):
                if st.mode == "register" and cid != self.peer_id:
                    self._observe(cid, cep)
                self._merge(st, cid, cep)
        if not st.inflight:
            self._advance(st)

    def _round_timeout(self, st: LookupState):
        st.round_timer = None
        if st.finished or not st.inflight:
            return
        for pid, handle in list(st.inflight.items()):
            st.messages += handle.attempts
            self.rtx.cancel(handle)
            st.failed.add(pid)
        st.drop(set(st.inflight))
        st.inflight.clear()
        self._advance(st)

    def _advance(self, st: LookupState):
        self.timers.cancel(st.round_timer)
        st.round_timer = None
        k = self.params.k
        st.trim(k)
        unqueried = [(pid, ep) for _, pid, ep in st.searchlist if pid not in st.queried]
        if not unqueried:
            self._finish_lookup(st)
            return
        nearest = st.searchlist[0][1]
        if nearest != st.closest_neighbor:
            st.closest_neighbor = nearest
            picks = unqueried[: self.params.alpha]
        else:
            picks = unqueried
        self._send_round(st, picks)

    def _finish_lookup(self, st: LookupState, starved: bool = False):
        if st.finished:
            return
        st.finished = True
        self.timers.cancel(st.round_timer)
        for handle in st.inflight.values():
            st.messages += handle.attempts
            self.rtx.cancel(handle)
        st.inflight.clear()
        self.lookups.pop(st.lookup_id, None)
        contacts = [
            Contact(pid, ep, last_seen=self.now)
            for _, pid, ep in st.searchlist[: self.params.k]
            if pid in st.responded_active
        ]
        result = LookupResult(
            target=st.target,
            contacts=contacts,
            rounds=st.rounds,
            messages=st.messages,
            queried=len(st.queried),
            found=st.found,
            starved=starved,
        )
        if st.mode != "register":
            self.finished_lookups.append(result)
        st.completion.resolve(st if st.mode == "register" else result)

    def _handle_find_callees(self, frame: FullFrame, src):
        target = read_uint(frame, IE.TARGET_KEY)
        if target is None:
            return
        self._reply(K.REPLY_CONTACTS, src, frame, self._contacts_body(target))

    def _handle_find_callee(self, frame: FullFrame, src):
        target = read_uint(frame, IE.TARGET_KEY)
        if target is None:
            return
        if target == self.peer_id:
            record = self._self_record()
        else:
            c = self.table.get(target)
            record = encode_record(c.peer_id, c.endpoint, self.id_bytes) if c and c.online else None
        if record is not None:
            self._reply(K.REPLY_CALLEE, src, frame, [InformationElement(IE.SUBJECT, record)])
        else:
            self._reply(K.REPLY_CONTACTS, src, frame, self._contacts_body(target))

    # --- PING / PONG ------------------------------------------------------------

    def _handle_ping(self, frame: FullFrame, src):
        key = read_uint(frame, IE.TARGET_KEY)
        body = self._contacts_body(key) if key is not None else []
        self._reply(K.PONG, src, frame, body, reliable=True)

    def _handle_pong(self, frame: FullFrame, src):
        self._send_ack(src, frame, source_call=frame.dest_call)

    def _send_ack(self, dest, frame: FullFrame, source_call: int = 0):
        ack = FullFrame(
            source_call=source_call,
            dest_call=frame.source_call,
            kind=K.ACK,
            timestamp_ms=self.now & 0xFFFFFFFF,
            oseqno=0,
            iseqno=frame.oseqno,
            body=tuple(self._ident()),
        )
        self._bump("acks_sent")
        self._transmit(dest, encode_frame(ack))

    # --- calls ------------------------------------------------------------------

    def setup_call(self, callee_address: str, now: int) -> Completion:
        """Resolve ``callee_address`` then run NEW/ACCEPT/ANSWER; resolves to the local call number."""
        self.now = now
        done = Completion()
        try:
            lookup = self.resolve_callee(callee_address, now)
        except AddressError as exc:
            done.fail(f"bad address: {exc}")
            return done

        def resolved(c: Completion):
            if not c.ok or c.value.found is None:
                self._bump("calls_no_route")
                done.fail("no route")
                return
            self._place_call(c.value.found, normalize_address(callee_address), done)

        lookup.add_callback(resolved)
        return done

    def _place_call(self, callee: Contact, address: str, done: Completion):
        if self.registration != REGISTERED:
            done.fail("node left the overlay")
            return
        local = self.calls.allocate()
        call = CallState(local, callee, "caller", completion=done, address=address)
        self.sessions[local] = call
        body = [InformationElement(IE.ADDRESS, address.encode())]
        frame = self._frame(K.NEW, callee.endpoint, body, source_call=local, oseqno=self._call_seq(call))
        self._bump("new_sent")

        def timed_out(handle, now):
            if call.phase == "initiating":
                self._end_call(call)
                done.fail("unreachable")

        self.rtx.send(frame, callee.endpoint, self.now, on_timeout=timed_out)

    def _call_seq(self, call: CallState) -> int:
        n = call.oseqno
        call.oseqno = (n + 1) & 0xFF
        return n

    def _session_frame(self, call: CallState, kind, body=(), iseqno=0) -> FullFrame:
        return self._frame(
            kind, call.peer.endpoint, body,
            source_call=call.local_call, dest_call=call.remote_call or 0,
            oseqno=self._call_seq(call), iseqno=iseqno,
        )

    def _handle_new(self, frame: FullFrame, src):
        if (src, frame.source_call) in self._remote_index:
            return
        address = frame.ie(IE.ADDRESS)
        if self.registration != REGISTERED or (address is not None and address.decode() != self.address):
            reject = FullFrame(0, frame.source_call, K.HANGUP, self.now & 0xFFFFFFFF, 0,
                               frame.oseqno, body=(uint_ie(IE.CAUSE, CAUSE_NO_SUCH_USER, 1),))
            self._transmit(src, encode_frame(reject))
            return
        sender = read_uint(frame, IE.PEER_ID)
        local = self.calls.allocate()
        call = CallState(local, Contact(sender if sender is not None else 0, src), "callee",
                         remote_call=frame.source_call, phase="ringing")
        self.sessions[local] = call
        self._remote_index[(src, frame.source_call)] = local
        accept = self._session_frame(call, K.ACCEPT, iseqno=frame.oseqno)
        self.rtx.send(accept, src, self.now, on_ack=lambda h, f, t: self._send_answer(call))
        self._signal("call_incoming", local_call=local)

    def _send_answer(self, call: CallState):
        if call.phase != "ringing":
            return
        answer = self._session_frame(call, K.ANSWER)

        def answered(h, f, t):
            if call.phase == "ringing":
                call.phase = "up"
                self._signal("call_up", local_call=call.local_call)

        self.rtx.send(answer, call.peer.endpoint, self.now, on_ack=answered)

    def _handle_accept(self, frame: FullFrame, src):
        call = self.sessions.get(frame.dest_call)
        if call is None or call.role != "caller" or call.peer.endpoint != src:
            return
        if call.phase == "initiating":
            call.remote_call = frame.source_call
            call.phase = "ringing"
            self._remote_index[(src, frame.source_call)] = call.local_call
        self._send_ack(src, frame, source_call=call.local_call)

    def _handle_answer(self, frame: FullFrame, src):
        call = self.sessions.get(frame.dest_call)
        if call is None or call.remote_call != frame.source_call:
            return
        self._send_ack(src, frame, source_call=call.local_call)
        if call.phase == "ringing":
            call.phase = "up"
            self._signal("call_up", local_call=call.local_call)
            if call.completion:
                call.completion.resolve(call.local_call)

    def _handle_hangup(self, frame: FullFrame, src):
        call = self.sessions.get(frame.dest_call)
        if call is not None and call.phase == "initiating" and call.remote_call is None:
            # rejection of our NEW
            self._end_call(call)
            if call.completion:
                call.completion.fail(CAUSE_TEXT.get(read_uint(frame, IE.CAUSE), "rejected"))
            return
        self._send_ack(src, frame, source_call=frame.dest_call)
        if call is not None and call.remote_call == frame.source_call:
            self._end_call(call)

    def _end_call(self, call: CallState):
        call.phase = "hungup"
        self.sessions.pop(call.local_call, None)
        self.calls.release(call.local_call)
        if call.remote_call is not None:
            self._remote_index.pop((call.peer.endpoint, call.remote_call), None)
        self._signal("call_ended", local_call=call.local_call)

    def send_media(self, call_id: int, payload: bytes, now: int):
        self.now = now
        call = self.sessions.get(call_id)
        if call is None or call.phase != "up":
            raise CallStateError(f"call {call_id} is not up")
        call.media_frames_sent += 1
        self._transmit(call.peer.endpoint,
                       encode_frame(MiniFrame(call.local_call, now & 0xFFFF, bytes(payload))))

    def _on_media(self, frame: MiniFrame, src):
        self._bump("mini_received")
        local = self._remote_index.get((src, frame.source_call))
        call = self.sessions.get(local) if local is not None else None
        if call is not None and call.phase == "up":
            call.media_frames_received += 1

    def hangup(self, call_id: int, now: int) -> Completion:
        self.now = now
        call = self.sessions.get(call_id)
        if call is None or call.phase == "hungup":
            raise CallStateError(f"call {call_id} is not active")
        done = Completion()
        frame = self._session_frame(call, K.HANGUP, [uint_ie(IE.CAUSE, CAUSE_NORMAL, 1)])

        def finished(*_):
            if call.local_call in self.sessions:
                self._end_call(call)
            done.resolve(call_id)

        call.phase = "hungup"
        self.rtx.send(frame, call.peer.endpoint, now, on_ack=finished, on_timeout=finished)
        return done

    # --- release ----------------------------------------------------------------

    def release(self, now: int) -> Completion:
        """Leave gracefully: REGREL to every online contact, then go silent."""
        self.now = now
        done = Completion()
        if self.registration != REGISTERED:
            done.fail(f"cannot release from state {self.registration}")
            return done
        contacts = self.table.all_contacts(include_offline=False)
        for st in list(self.lookups.values()):
            self._finish_lookup(st)
        self.registration = RELEASING
        flood_id = self.rng.getrandbits(64)
        self.seen_floods[flood_id] = now + FLOOD_RETENTION_MS
        if not contacts:
            self.registration = RELEASED
            self._signal("released", contacts=0)
            done.resolve(0)
            return done
        pending = {"n": len(contacts)}

        def one_done(*_):
            pending["n"] -= 1
            if pending["n"] == 0:
                self.registration = RELEASED
                self._signal("released", contacts=len(contacts))
                done.resolve(len(contacts))

        body = [
            InformationElement(IE.SUBJECT, self._self_record()),
            uint_ie(IE.FLOOD_ID, flood_id, 8),
            uint_ie(IE.HOP_COUNT, 0, 1),
        ]
        for c in contacts:
            self._bump("regrel_sent")
            self._request(K.REGREL, c.endpoint, body, on_ack=one_done, on_timeout=one_done)
        return done

    def _handle_regrel(self, frame: FullFrame, src):
        self._reply(K.REGACK, src, frame)
        subject = frame.ie(IE.SUBJECT)
        flood_id = read_uint(frame, IE.FLOOD_ID)
        if subject is None or flood_id is None or flood_id in self.seen_floods:
            return
        released_id, released_ep = decode_record(subject)
        if released_id == self.peer_id:
            return
        self.seen_floods[flood_id] = self.now + FLOOD_RETENTION_MS
        if self.table is not None:
            self.table.mark_offline(released_id, self.now)
        self._arm_sweep()
        hop = read_uint(frame, IE.HOP_COUNT) or 0
        if hop >= self.hop_limit or self.table is None:
            return
        sender = read_uint(frame, IE.PEER_ID)
        skip = {released_id, sender}
        targets = [
            c for c in self.table.closest_contacts(released_id, self.params.alpha + 2)
            if c.peer_id not in skip and c.endpoint != src
        ][: self.params.alpha]
        body = [
            InformationElement(IE.SUBJECT, subject),
            uint_ie(IE.FLOOD_ID, flood_id, 8),
            uint_ie(IE.HOP_COUNT, hop + 1, 1),
        ]
        for c in targets:
            self._bump("regrel_forwarded")
            self._request(K.REGREL, c.endpoint, body)

    # --- housekeeping -----------------------------------------------------------

    def _arm_sweep(self):
        if self._sweep_timer is None:
            self._sweep_timer = self.timers.schedule(self.now + SWEEP_INTERVAL_MS, self._sweep)

    def _sweep(self, now: int):
        self._sweep_timer = None
        self.now = now
        if self.table is not None:
            removed = self.table.purge_expired(now)
            if removed:
                self._signal("purged", peers=removed)
        for flood_id in [f for f, exp in self.seen_floods.items() if exp <= now]:
            del self.seen_floods[flood_id]
        if self.seen_floods or (self.table is not None and self.table.has_offline()):
            self._arm_sweep()

    _handlers = {
        K.REGREQ: _handle_regreq,
        K.REGREL: _handle_regrel,
        K.FIND_CALLEES: _handle_find_callees,
        K.FIND_CALLEE: _handle_find_callee,
        K.PING: _handle_ping,
        K.PONG: _handle_pong,
        K.NEW: _handle_new,
        K.ACCEPT: _handle_accept,
        K.ANSWER: _handle_answer,
        K.HANGUP: _handle_hangup,
    }
