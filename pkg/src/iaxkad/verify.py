"""Runtime invariant suite behind ``iaxkad verify``.

Each check returns ``(name, ok, detail)``; sizes are kept small so the whole
suite finishes in well under a minute.
"""
from __future__ import annotations

import random

from .identity import KademliaParams, bucket_index, xor_distance
from .routing import Contact, RoutingTable
from .sim import Scenario, SimNet, metrics_json, run_scenario
from .wire import FullFrame, InformationElement, MessageKind, MiniFrame, decode_frame, encode_frame


def check_xor_laws(seed: int, cases: int = 10_000):
    rng = random.Random(seed)
    violations = 0
    for bits in (8, 160):
        for _ in range(cases):
            a, b, c = (rng.getrandbits(bits) for _ in range(3))
            d = xor_distance(a, b)
            violations += d != xor_distance(b, a)
            violations += xor_distance(a, a) != 0
            violations += (d == 0) != (a == b)
            violations += (a ^ d) != b
            violations += xor_distance(a, c) > d + xor_distance(b, c)
            if a != b:
                i = bucket_index(a, b)
                violations += not (1 << i) <= d < (1 << (i + 1))
    return "xor-laws", violations == 0, f"{violations} violations"


def check_routing_table(seed: int, ops: int = 10_000):
    rng = random.Random(seed)
    params = KademliaParams(bits=16, k=20)
    table = RoutingTable(rng.getrandbits(16), params)
    now, problems = 0, []
    for _ in range(ops):
        now += rng.randint(0, 3_600_000)
        r = rng.random()
        pid = rng.getrandbits(16)
        if pid == table.local_id:
            continue
        if r < 0.7:
            table.observe_contact(Contact(pid, ("10.0.0.1", 4569)), now)
        elif r < 0.9:
            existing = table.all_contacts(include_offline=True)
            if existing:
                table.mark_offline(rng.choice(existing).peer_id, now)
        else:
            table.purge_expired(now)
        problems = table.check_invariants()
        if problems:
            break
    return "routing-table", not problems, "; ".join(problems[:3]) or f"{ops} operations"


def check_codec(seed: int, frames: int = 5_000):
    rng = random.Random(seed)
    kinds = list(MessageKind)
    bad = 0
    for _ in range(frames):
        if rng.random() < 0.2:
            f = MiniFrame(rng.randint(0, 0x7FFF), rng.randint(0, 0xFFFF), rng.randbytes(rng.randint(0, 64)))
        else:
            body = tuple(InformationElement(rng.randint(0, 255), rng.randbytes(rng.randint(0, 255)))
                         for _ in range(rng.randint(0, 4)))
            f = FullFrame(rng.randint(0, 0x7FFF), rng.randint(0, 0x7FFF), rng.choice(kinds),
                          rng.getrandbits(32), rng.getrandbits(8), rng.getrandbits(8),
                          rng.random() < 0.5, body)
        data = encode_frame(f)
        back = decode_frame(data)
        bad += back != f or encode_frame(back) != data
    return "codec-roundtrip", bad == 0, f"{bad} mismatches over {frames}"


def check_lookup_oracle(seed: int, n: int = 60, lookups: int = 100):
    net = SimNet(seed=seed)
    net.bootstrap_network(n)
    net.run()
    net.refresh_all()
    net.run()
    rng = random.Random(seed)
    gaps = net.closest_region_gaps()
    mismatches = 0
    for _ in range(lookups):
        node = rng.choice(net.live_nodes())
        target = rng.getrandbits(net.params.bits)
        c = net.lookup(node, target)
        net.run()
        got = {x.peer_id for x in c.value.contacts}
        mismatches += got != set(net.oracle_k_closest(target, net.params.k, exclude={node.peer_id}))
    ok = mismatches == 0 and not gaps
    return "lookup-oracle", ok, f"{mismatches} lookup mismatches, {len(gaps)} incomplete tables"


def check_release_flood(seed: int, n: int = 60):
    net = SimNet(seed=seed)
    net.bootstrap_network(n)
    net.run()
    alpha = net.params.alpha
    rng = random.Random(seed)
    worst = 0.0
    for node in rng.sample(net.live_nodes()[1:], max(1, n // 10)):
        m = len(node.table.all_contacts())
        before = net.originals_by_kind.get("REGREL", 0)
        net.release(node)
        net.run(until=net.clock + 60_000)
        sent = net.originals_by_kind.get("REGREL", 0) - before
        worst = max(worst, sent / max(1, m * (1 + alpha + alpha ** 2 + alpha ** 3)))
    return "release-flood-bound", worst <= 1.0, f"worst ratio to bound {worst:.3f}"


def check_determinism(seed: int):
    s = Scenario(n_peers=30, seed=seed, random_lookups=20, random_calls=5, media_per_call=2)
    a, b = metrics_json(run_scenario(s)), metrics_json(run_scenario(s))
    return "determinism", a == b, "identical metrics" if a == b else "metrics differ"


CHECKS = [check_xor_laws, check_routing_table, check_codec, check_lookup_oracle,
          check_release_flood, check_determinism]


def run_all(seed: int = 7):
    return [check(seed) for check in CHECKS]
