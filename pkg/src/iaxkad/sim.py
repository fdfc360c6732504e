"""Deterministic discrete-event network hosting many peers, plus brute-force oracles."""
from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from statistics import mean
from typing import Callable

from .engine import REGISTERED, PeerNode
from .errors import ConfigError
from .identity import KademliaParams, PeerId
from .routing import Contact, format_endpoint
from .wire import IAX_PORT, MessageKind

KIND_NAMES = {k.value: k.name for k in MessageKind}


@dataclass
class LinkModel:
    latency_min_ms: int = 10
    latency_max_ms: int = 50
    jitter_ms: int = 0
    loss: float = 0.0
    partitions: list = field(default_factory=list)  # list of sets of endpoints

    def __post_init__(self):
        if not 0.0 <= self.loss <= 1.0:
            raise ConfigError(f"loss probability must lie in [0, 1], got {self.loss}")
        if not 0 <= self.latency_min_ms <= self.latency_max_ms:
            raise ConfigError("latency bounds out of order")

    def connected(self, src, dst) -> bool:
        if not self.partitions:
            return True
        for group in self.partitions:
            if src in group:
                return dst in group
        return not any(dst in group for group in self.partitions)


def endpoint_for(index: int):
    return (f"10.{(index >> 16) & 0xFF}.{(index >> 8) & 0xFF}.{index & 0xFF}", IAX_PORT)


def address_for(index: int) -> str:
    return f"peer{index}@sim.example"


def _kind_name(data: bytes) -> str:
    if data[0] & 0x80:
        return KIND_NAMES.get(data[11], "UNKNOWN") if len(data) >= 12 else "UNKNOWN"
    return "MINI"


class SimNet:
    """Single-threaded event loop; events run in (time, insertion) order."""

    def __init__(self, params: KademliaParams | None = None, seed: int = 0,
                 link: LinkModel | None = None, trace: bool = False, **node_options):
        self.params = params or KademliaParams()
        self.seed = seed
        self.rng = random.Random(seed)
        self.link = link or LinkModel()
        self.clock = 0
        self._queue: list = []
        self._seq = 0
        self.nodes: dict[tuple, PeerNode] = {}
        self.order: list[PeerNode] = []
        self.crashed: set = set()
        self._crash_at: dict = {}
        self._tick_at: dict = {}
        self._latency: dict = {}
        self.node_options = node_options
        self.counters = {"sent": 0, "delivered": 0, "dropped_loss": 0, "dropped_dead": 0,
                         "dropped_partition": 0}
        self.sent_by_kind: dict[str, int] = {}
        self.originals_by_kind: dict[str, int] = {}
        self.trace: list | None = [] if trace else None

    # --- topology ---------------------------------------------------------------

    def add_peer(self, address: str | None = None, bootstrap: bool = False, **options) -> PeerNode:
        index = len(self.order)
        endpoint = endpoint_for(index + 1)
        address = address or address_for(index)
        node_rng = random.Random(self.rng.getrandbits(64))
        kw = dict(self.node_options)
        kw.update(options)
        node = PeerNode(address, endpoint, self.params, node_rng, bootstrap=bootstrap, **kw)
        self.nodes[endpoint] = node
        self.order.append(node)
        return node

    def node(self, ref) -> PeerNode:
        if isinstance(ref, PeerNode):
            return ref
        if isinstance(ref, int):
            if not 0 <= ref < len(self.order):
                raise ConfigError(f"no peer with index {ref}")
            return self.order[ref]
        if isinstance(ref, str):
            host, _, port = ref.rpartition(":")
            ref = (host, int(port)) if host else (ref, IAX_PORT)
        node = self.nodes.get(tuple(ref))
        if node is None:
            raise ConfigError(f"unknown endpoint {ref!r}")
        return node

    def contact_of(self, node: PeerNode) -> Contact:
        return Contact(node.peer_id, node.endpoint, last_seen=self.clock)

    def is_live(self, node: PeerNode) -> bool:
        return node.registration == REGISTERED and node.endpoint not in self.crashed

    def live_nodes(self) -> list[PeerNode]:
        return [n for n in self.order if self.is_live(n)]

    # --- event loop -------------------------------------------------------------

    def _push(self, time: int, kind: str, payload):
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, kind, payload))

    def at(self, time: int, fn: Callable[[], None]):
        """Run ``fn`` at simulated ``time`` (never earlier than now)."""
        self._push(max(time, self.clock), "call", fn)

    def _pair_latency(self, src, dst) -> int:
        key = (src, dst)
        lat = self._latency.get(key)
        if lat is None:
            digest = hashlib.blake2b(
                f"{self.seed}|{format_endpoint(src)}|{format_endpoint(dst)}".encode(), digest_size=8
            ).digest()
            span = self.link.latency_max_ms - self.link.latency_min_ms + 1
            lat = self.link.latency_min_ms + int.from_bytes(digest, "big") % span
            self._latency[key] = lat
        return lat

    def _send(self, src, dst, data: bytes):
        self.counters["sent"] += 1
        name = _kind_name(data)
        self.sent_by_kind[name] = self.sent_by_kind.get(name, 0) + 1
        if name == "MINI" or not data[2] & 0x80:
            self.originals_by_kind[name] = self.originals_by_kind.get(name, 0) + 1
        if self.trace is not None:
            self.trace.append({"t": self.clock, "ev": "send", "src": format_endpoint(src),
                               "dst": format_endpoint(dst), "kind": name, "hex": data.hex()})
        if not self.link.connected(src, dst):
            self.counters["dropped_partition"] += 1
            return
        if self.link.loss and self.rng.random() < self.link.loss:
            self.counters["dropped_loss"] += 1
            return
        delay = self._pair_latency(src, dst)
        if self.link.jitter_ms:
            delay += self.rng.randint(0, self.link.jitter_ms)
        self._push(self.clock + delay, "frame", (src, dst, data))

    def _flush(self, node: PeerNode, outgoing=()):
        for dst, data in list(outgoing) + node.drain():
            self._send(node.endpoint, dst, data)
        deadline = node.next_deadline()
        if deadline is None:
            return
        current = self._tick_at.get(node.endpoint)
        if current is None or deadline < current:
            self._tick_at[node.endpoint] = deadline
            self._push(deadline, "tick", node.endpoint)

    def _dispatch(self, time: int, kind: str, payload):
        if kind == "frame":
            src, dst, data = payload
            node = self.nodes.get(dst)
            if node is None or dst in self.crashed:
                self.counters["dropped_dead"] += 1
                return
            self.counters["delivered"] += 1
            if self.trace is not None:
                self.trace.append({"t": time, "ev": "recv", "src": format_endpoint(src),
                                   "dst": format_endpoint(dst), "kind": _kind_name(data)})
            self._flush(node, node.handle_datagram(data, src, time))
        elif kind == "tick":
            endpoint = payload
            if self._tick_at.get(endpoint) == time:
                del self._tick_at[endpoint]
            if endpoint in self.crashed:
                return
            node = self.nodes[endpoint]
            self._flush(node, node.tick(time))
        elif kind == "crash":
            self.crashed.add(payload)
        else:
            payload()

    def step(self) -> bool:
        if not self._queue:
            return False
        time, _, kind, payload = heapq.heappop(self._queue)
        self.clock = time
        self._dispatch(time, kind, payload)
        return True

    def run(self, until: int | None = None, idle_only: bool = False):
        """Process events until the queue empties or the next one lies beyond ``until``."""
        while self._queue:
            if until is not None and self._queue[0][0] > until:
                break
            self.step()
        if until is not None and until > self.clock:
            self.clock = until

    def run_until(self, predicate: Callable[[], bool], limit: int | None = None):
        while self._queue and not predicate():
            if limit is not None and self._queue[0][0] > limit:
                break
            self.step()

    def in_flight(self) -> int:
        return sum(1 for e in self._queue if e[2] == "frame")

    # --- commands ---------------------------------------------------------------

    def _command(self, node: PeerNode, fn):
        if node.endpoint in self.crashed:
            return None
        result = fn(node)
        self._flush(node)
        return result

    def join(self, ref, first_contact=None):
        node = self.node(ref)
        contact = None
        if first_contact is not None:
            contact = self.contact_of(self.node(first_contact))
        return self._command(node, lambda n: n.join(self.clock, contact))

    def lookup(self, ref, target: PeerId):
        return self._command(self.node(ref), lambda n: n.lookup_k_closest(target, self.clock))

    def refresh(self, ref):
        return self._command(self.node(ref), lambda n: n.refresh(self.clock))

    def refresh_all(self, spacing_ms: int = 10):
        """Schedule one self-refresh per live peer, ``spacing_ms`` apart."""
        for i, node in enumerate(self.live_nodes()):
            self.at(self.clock + i * spacing_ms,
                    lambda node=node: self.refresh(node) if self.is_live(node) else None)

    def resolve(self, ref, address: str):
        return self._command(self.node(ref), lambda n: n.resolve_callee(address, self.clock))

    def call(self, ref, address: str):
        return self._command(self.node(ref), lambda n: n.setup_call(address, self.clock))

    def media(self, ref, call_id: int, payload: bytes):
        return self._command(self.node(ref), lambda n: n.send_media(call_id, payload, self.clock))

    def hangup(self, ref, call_id: int):
        return self._command(self.node(ref), lambda n: n.hangup(call_id, self.clock))

    def release(self, ref):
        return self._command(self.node(ref), lambda n: n.release(self.clock))

    def inject_crash(self, ref, time: int | None = None):
        """Silence a node at ``time`` without any REGREL; frames it already sent still arrive."""
        node = self.node(ref)
        when = self.clock if time is None else time
        self._push(max(when, self.clock), "crash", node.endpoint)

    def bootstrap_network(self, n: int, join_interval_ms: int = 1000):
        """Add ``n`` peers; peer 0 is the registration server, the rest join through it."""
        if n < 1:
            return []
        start = len(self.order)
        for i in range(n):
            self.add_peer(bootstrap=(start + i == 0))
        server = self.order[0]
        joins = []
        for i in range(start, start + n):
            node = self.order[i]
            t = self.clock + (i - start) * join_interval_ms

            def go(node=node):
                first = None if node is server else server
                joins.append(self.join(node, first))

            self.at(t, go)
        return joins

    # --- oracles ----------------------------------------------------------------

    def oracle_k_closest(self, target: PeerId, k: int, exclude=()) -> list[PeerId]:
        ids = [n.peer_id for n in self.order if self.is_live(n) and n.peer_id not in exclude]
        ids.sort(key=lambda pid: pid ^ target)
        return ids[:k]

    def oracle_resolvable(self, callee_address: str) -> bool:
        address = callee_address.lower()
        return any(n.address == address and self.is_live(n) for n in self.order)

    def registry_endpoint(self, callee_address: str):
        address = callee_address.lower()
        for n in self.order:
            if n.address == address and self.is_live(n):
                return n.endpoint
        return None

    def closest_region_gaps(self, k: int | None = None) -> dict:
        """Per live node, the globally-closest live peers missing from its table."""
        k = k or self.params.k
        gaps = {}
        for n in self.live_nodes():
            want = self.oracle_k_closest(n.peer_id, k, exclude={n.peer_id})
            missing = [pid for pid in want if pid not in n.table or not n.table.get(pid).online]
            if missing:
                gaps[n.endpoint] = missing
        return gaps


# --- scenarios --------------------------------------------------------------------

@dataclass
class Scenario:
    params: KademliaParams = field(default_factory=KademliaParams)
    n_peers: int = 10
    seed: int = 0
    loss: float = 0.0
    latency_ms: tuple = (10, 50)
    join_interval_ms: int = 1000
    join_schedule: list = field(default_factory=list)
    release_schedule: list = field(default_factory=list)
    crash_schedule: list = field(default_factory=list)
    call_workload: list = field(default_factory=list)
    resolve_workload: list = field(default_factory=list)
    lookup_workload: list = field(default_factory=list)
    random_lookups: int = 0
    random_resolves: int = 0
    random_calls: int = 0
    media_per_call: int = 0
    workload_start_ms: int | None = None
    workload_interval_ms: int = 50
    refresh_pass: bool = True
    horizon_ms: int | None = None
    settle_ms: int = 120_000

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        data = dict(data)
        params = data.pop("params", {}) or {}
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        try:
            p = KademliaParams(**params)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if "latency_ms" in data:
            data["latency_ms"] = tuple(data["latency_ms"])
        s = cls(params=p, **data)
        s.validate()
        return s

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["params"] = self.params.as_dict()
        out["latency_ms"] = list(self.latency_ms)
        return out

    def validate(self):
        if self.n_peers < 0:
            raise ConfigError("n_peers must be non-negative")
        if not 0 <= self.loss <= 1:
            raise ConfigError("loss must lie in [0, 1]")
        for name in ("join_schedule", "release_schedule", "crash_schedule", "call_workload",
                     "resolve_workload", "lookup_workload"):
            entries = getattr(self, name)
            times = [e[0] for e in entries]
            if times != sorted(times):
                raise ConfigError(f"{name} is not time-sorted")


def _ref_index(ref, n: int) -> int:
    if isinstance(ref, int):
        if not 0 <= ref < n:
            raise ConfigError(f"schedule references unknown peer index {ref}")
        return ref
    if isinstance(ref, str):
        host, _, port = ref.rpartition(":")
        for i in range(n):
            if endpoint_for(i + 1) == (host or ref, int(port) if host else IAX_PORT):
                return i
    raise ConfigError(f"schedule references unknown endpoint {ref!r}")


def run_scenario(s: Scenario, trace: list | None = None) -> dict:
    """Run ``s`` to completion and return its metrics as a plain dict.

    When ``trace`` is a list it receives one record per frame sent or received.
    """
    s.validate()
    n = s.n_peers
    # resolve every reference up front so a bad schedule fails before the run
    joins = [(t, _ref_index(r, n)) for t, r in s.join_schedule] or [
        (i * s.join_interval_ms, i) for i in range(n)
    ]
    releases = [(t, _ref_index(r, n)) for t, r in s.release_schedule]
    crashes = [(t, _ref_index(r, n)) for t, r in s.crash_schedule]
    calls = [(t, _ref_index(a, n), _ref_index(b, n)) for t, a, b in s.call_workload]
    resolves = [(t, _ref_index(a, n), _ref_index(b, n)) for t, a, b in s.resolve_workload]
    lookups = [(t, _ref_index(a, n), target) for t, a, target in s.lookup_workload]

    link = LinkModel(latency_min_ms=s.latency_ms[0], latency_max_ms=s.latency_ms[1], loss=s.loss)
    net = SimNet(s.params, s.seed, link, trace=trace is not None)
    for i in range(n):
        net.add_peer(bootstrap=(i == 0))
    wl_rng = random.Random(s.seed ^ 0x5EED)
    m = _MetricsCollector(net)

    for t, i in joins:
        node = net.order[i]
        net.at(t, lambda node=node: m.track_join(node, net.join(node, None if node.bootstrap else 0)))

    last_join = max((t for t, _ in joins), default=0)
    if s.refresh_pass:
        net.at(last_join + 20_000, lambda: net.refresh_all())
    start = s.workload_start_ms if s.workload_start_ms is not None else last_join + 30_000 + 10 * n
    step = s.workload_interval_ms

    def random_live_pair():
        live = net.live_nodes()
        if len(live) < 2:
            return None
        a, b = wl_rng.sample(live, 2)
        return a, b

    for j in range(s.random_lookups):
        def go():
            live = net.live_nodes()
            if not live:
                return
            node = wl_rng.choice(live)
            m.track_lookup(node, wl_rng.getrandbits(s.params.bits))
        net.at(start + j * step, go)
    for t, i, target in lookups:
        def go(i=i, target=target):
            key = wl_rng.getrandbits(s.params.bits) if target in (None, "random") else int(target, 16)
            m.track_lookup(net.order[i], key)
        net.at(t, go)

    offset = start + s.random_lookups * step
    for j in range(s.random_resolves):
        def go():
            pair = random_live_pair()
            if pair:
                m.track_resolve(*pair)
        net.at(offset + j * step, go)
    for t, a, b in resolves:
        net.at(t, lambda a=a, b=b: m.track_resolve(net.order[a], net.order[b]))

    offset += s.random_resolves * step
    for j in range(s.random_calls):
        def go():
            pair = random_live_pair()
            if pair:
                m.track_call(*pair, s.media_per_call)
        net.at(offset + j * step, go)
    for t, a, b in calls:
        net.at(t, lambda a=a, b=b: m.track_call(net.order[a], net.order[b], s.media_per_call))
    offset += s.random_calls * step

    for t, i in releases:
        net.at(t, lambda i=i: m.track_release(net.order[i]))
    for t, i in crashes:
        net.inject_crash(net.order[i], t)

    scheduled = [offset, last_join] + [e[0] for e in s.release_schedule + s.crash_schedule
                                       + s.call_workload + s.resolve_workload + s.lookup_workload]
    horizon = s.horizon_ms if s.horizon_ms is not None else max(scheduled) + s.settle_ms
    net.run(until=horizon)
    metrics = m.finish(horizon)
    if trace is not None:
        trace.extend(net.trace)
    metrics["config"] = s.to_dict()
    return metrics


class _MetricsCollector:
    def __init__(self, net: SimNet):
        self.net = net
        self.joins = {"ok": 0, "failed": 0, "last_done_ms": 0}
        self.lookups = []
        self.resolves = []
        self.calls = []
        self.releases = []

    def track_join(self, node, completion):
        if completion is None:
            return

        def done(c):
            key = "ok" if c.ok else "failed"
            self.joins[key] += 1
            self.joins["last_done_ms"] = max(self.joins["last_done_ms"], self.net.clock)

        completion.add_callback(done)

    def track_lookup(self, node, target):
        if not self.net.is_live(node):
            return
        c = self.net.lookup(node, target)

        def done(c):
            if not c.ok:
                self.lookups.append({"ok": False})
                return
            r = c.value
            oracle = set(self.net.oracle_k_closest(target, self.net.params.k, exclude={node.peer_id}))
            got = {x.peer_id for x in r.contacts}
            self.lookups.append({"ok": True, "rounds": r.rounds, "messages": r.messages,
                                 "exact": got == oracle})

        c.add_callback(done)

    def track_resolve(self, caller, callee):
        expected = self.net.registry_endpoint(callee.address)
        c = self.net.resolve(caller, callee.address)
        if c is None:
            return

        def done(c):
            found = c.value.found if c.ok else None
            if expected is None:
                correct = found is None
            else:
                correct = found is not None and found.endpoint == expected
            self.resolves.append({"found": found is not None, "correct": correct,
                                  "rounds": c.value.rounds if c.ok else 0})

        c.add_callback(done)

    def track_call(self, caller, callee, media: int):
        c = self.net.call(caller, callee.address)
        if c is None:
            return
        record = {"up": False, "error": None, "media_sent": 0}
        self.calls.append(record)

        def done(c):
            if not c.ok:
                record["error"] = c.error
                return
            record["up"] = True
            for i in range(media):
                self.net.at(self.net.clock + 20 * (i + 1),
                            lambda: self._media(caller, c.value, record))
            self.net.at(self.net.clock + 20 * (media + 1) + 10,
                        lambda: self.net.hangup(caller, c.value) if c.value in caller.sessions else None)

        c.add_callback(done)

    def _media(self, caller, call_id, record):
        call = caller.sessions.get(call_id)
        if call is not None and call.phase == "up":
            self.net.media(caller, call_id, b"\x00" * 20)
            record["media_sent"] += 1

    def track_release(self, node):
        c = self.net.release(node)
        if c is not None:
            self.releases.append(c)

    def finish(self, horizon: int) -> dict:
        net = self.net
        ok_lookups = [x for x in self.lookups if x["ok"]]
        node_stats: dict[str, int] = {}
        for n in net.order:
            for key, value in n.stats.items():
                node_stats[key] = node_stats.get(key, 0) + value
        in_flight = net.in_flight()
        dropped = (net.counters["dropped_loss"] + net.counters["dropped_dead"]
                   + net.counters["dropped_partition"])
        return {
            "clock_ms": net.clock,
            "horizon_ms": horizon,
            "joins": dict(self.joins),
            "convergence_time_ms": self.joins["last_done_ms"],
            "lookups": {
                "count": len(self.lookups),
                "completed": len(ok_lookups),
                "mean_rounds": round(float(mean(x["rounds"] for x in ok_lookups)), 6) if ok_lookups else 0.0,
                "mean_messages": round(float(mean(x["messages"] for x in ok_lookups)), 6) if ok_lookups else 0.0,
                "oracle_exact_rate": round(sum(x["exact"] for x in ok_lookups) / len(ok_lookups), 6)
                if ok_lookups else 0.0,
            },
            "resolves": {
                "count": len(self.resolves),
                "found": sum(x["found"] for x in self.resolves),
                "success_rate": round(sum(x["correct"] for x in self.resolves) / len(self.resolves), 6)
                if self.resolves else 0.0,
            },
            "calls": {
                "count": len(self.calls),
                "up": sum(x["up"] for x in self.calls),
                "success_rate": round(sum(x["up"] for x in self.calls) / len(self.calls), 6)
                if self.calls else 0.0,
                "media_sent": sum(x["media_sent"] for x in self.calls),
            },
            "releases": {"count": len(self.releases),
                         "completed": sum(1 for c in self.releases if c.ok)},
            "messages": {
                "sent": net.counters["sent"],
                "delivered": net.counters["delivered"],
                "dropped": dropped,
                "in_flight": in_flight,
                "by_kind": dict(sorted(net.sent_by_kind.items())),
                "originals_by_kind": dict(sorted(net.originals_by_kind.items())),
            },
            "node_totals": dict(sorted(node_stats.items())),
        }


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def measure_scaling(sizes, seed: int = 0, lookups: int = 500,
                    params: KademliaParams | None = None) -> list[dict]:
    """Mean lookup rounds and messages on fresh static networks of each size."""
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ConfigError("sizes must be ascending")
    rows = []
    for n in sizes:
        s = Scenario(params=params or KademliaParams(), n_peers=n, seed=seed, random_lookups=lookups)
        m = run_scenario(s)
        rows.append({
            "n": n,
            "mean_rounds": m["lookups"]["mean_rounds"],
            "mean_messages": m["lookups"]["mean_messages"],
            "oracle_exact_rate": m["lookups"]["oracle_exact_rate"],
        })
    return rows
