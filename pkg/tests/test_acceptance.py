"""Acceptance criteria, each at its stated size and tolerance.

Every test prints one PASS/FAIL line; the lines are repeated in the
"acceptance criteria" section of the pytest summary.
"""
import json
import random
import time
from pathlib import Path

import pytest

from iaxkad.golden import golden_vectors
from iaxkad.identity import HOUR_MS, KademliaParams, bucket_index, xor_distance
from iaxkad.routing import Contact, RoutingTable
from iaxkad.sim import Scenario, SimNet, address_for, measure_scaling, metrics_json, run_scenario
from iaxkad.wire import FullFrame, InformationElement, MessageKind, MiniFrame, decode_frame, encode_frame

FIXTURES = Path(__file__).parent / "fixtures"


def test_01_xor_metric_laws(criterion):
    rng = random.Random(101)
    start = time.perf_counter()
    cases = violations = 0
    for bits in (8, 160):
        for _ in range(10_000):
            a, b, c = rng.getrandbits(bits), rng.getrandbits(bits), rng.getrandbits(bits)
            d = xor_distance(a, b)
            violations += d != xor_distance(b, a)  # symmetry
            violations += xor_distance(a, a) != 0  # identity
            violations += (d == 0) != (a == b)
            violations += a ^ d != b  # unidirectional: d fixes b given a
            violations += xor_distance(a, c) > d + xor_distance(b, c)  # triangle
            if a != b:
                i = bucket_index(a, b)
                violations += not (1 << i) <= d < (1 << (i + 1))
            cases += 1
    elapsed = time.perf_counter() - start
    criterion(1, "xor-metric laws", violations == 0 and elapsed < 5.0,
              f"{cases} cases, {violations} violations, {elapsed:.2f}s (< 5s)")


def test_02_routing_table_invariants(criterion):
    rng = random.Random(202)
    problems, ops = [], 0
    for bits in (160, 16):
        table = RoutingTable(rng.getrandbits(bits), KademliaParams(bits=bits, k=20))
        now = 0
        for _ in range(10_000):
            now += rng.randint(0, 2 * HOUR_MS)
            r = rng.random()
            pid = rng.getrandbits(bits)
            if r < 0.7:
                if pid != table.local_id:
                    table.observe_contact(Contact(pid, ("10.0.0.1", 4569)), now)
            elif r < 0.9:
                held = table.all_contacts(include_offline=True)
                if held:
                    table.mark_offline(rng.choice(held).peer_id, now)
            else:
                table.purge_expired(now)
            ops += 1
            problems += table.check_invariants()
    criterion(2, "routing-table invariants", not problems,
              f"{ops} operations at k=20, {len(problems)} violations")


def test_03_oracle_equivalence(criterion):
    start = time.perf_counter()
    m = run_scenario(Scenario(n_peers=200, seed=303, random_lookups=1000))
    elapsed = time.perf_counter() - start
    lk = m["lookups"]
    ok = lk["count"] == 1000 and lk["completed"] == 1000 and lk["oracle_exact_rate"] == 1.0 and elapsed < 60
    criterion(3, "lookup oracle equivalence", ok,
              f"N=200, {lk['completed']}/1000 lookups, exact rate {lk['oracle_exact_rate']:.4f}, "
              f"{elapsed:.1f}s (< 60s)")


def test_04_resolution_and_calls(criterion):
    start = time.perf_counter()
    m = run_scenario(Scenario(n_peers=500, seed=404, random_resolves=500, random_calls=500))
    elapsed = time.perf_counter() - start
    r, c = m["resolves"], m["calls"]
    ok = (r["count"] == 500 and r["success_rate"] == 1.0 and c["count"] == 500
          and c["success_rate"] == 1.0 and elapsed < 60)
    criterion(4, "resolution and call setup", ok,
              f"N=500, resolves {r['success_rate']:.3f} of {r['count']}, calls up "
              f"{c['success_rate']:.3f} of {c['count']}, {elapsed:.1f}s (< 60s)")


def test_05_lookup_rounds_scale_logarithmically(criterion):
    start = time.perf_counter()
    small, large = measure_scaling([256, 1024], seed=505, lookups=500)
    elapsed = time.perf_counter() - start
    r256, r1024 = small["mean_rounds"], large["mean_rounds"]
    ratio = r1024 / r256
    ok = r256 <= 10 and r1024 <= 12 and ratio <= 1.8 and elapsed < 120
    criterion(5, "O(log N) lookup rounds", ok,
              f"mean rounds {r256:.2f} @256 (<= 10), {r1024:.2f} @1024 (<= 12), "
              f"ratio {ratio:.2f} (<= 1.8), {elapsed:.1f}s (< 120s)")


def test_06_release_semantics(criterion):
    net = SimNet(seed=606)
    net.bootstrap_network(300)
    net.run()
    net.refresh_all()
    net.run()
    alpha = net.params.alpha
    rng = random.Random(606)
    releasers = rng.sample(net.order[1:], 30)
    not_marked = removed = bound_violations = worst = 0
    holders_total = direct_total = 0
    for node in releasers:
        # direct contacts: the online peers in the releaser's own table
        direct = [net.node(c.endpoint) for c in node.table.all_contacts()]
        direct = [n for n in direct if net.is_live(n)]
        holders = [n for n in direct if n.table.get(node.peer_id) is not None
                   and n.table.get(node.peer_id).online]
        m = len(node.table.all_contacts())
        before = net.originals_by_kind.get("REGREL", 0)
        done = net.release(node)
        net.run(until=net.clock + 60_000)
        assert done.ok
        sent = net.originals_by_kind.get("REGREL", 0) - before
        bound = m * (1 + alpha + alpha ** 2 + alpha ** 3)
        bound_violations += sent > bound
        worst = max(worst, sent / bound)
        for h in holders:
            c = h.table.get(node.peer_id)
            removed += c is None
            not_marked += c is not None and c.online
        holders_total += len(holders)
        direct_total += len(direct)

    survivors = net.live_nodes()
    not_found = 0
    for node in releasers:
        c = net.resolve(rng.choice(survivors), node.address)
        net.run()
        not_found += c.ok and c.value.found is None
    lookups_ok = 0
    for _ in range(300):
        a, b = rng.sample(survivors, 2)
        c = net.resolve(a, b.address)
        net.run()
        lookups_ok += c.ok and c.value.found is not None and c.value.found.endpoint == b.endpoint
    ok = (not_marked == 0 and removed == 0 and bound_violations == 0
          and not_found == len(releasers) and lookups_ok / 300 >= 0.99)
    criterion(6, "release semantics", ok,
              f"30 releases, {direct_total} direct contacts ({holders_total} holding the releaser): "
              f"{not_marked} still online, "
              f"{removed} removed; REGREL bound violations {bound_violations} (worst ratio {worst:.3f}); "
              f"released not_found {not_found}/30; survivor resolves {lookups_ok}/300")


def test_07_offline_expiry(criterion):
    net = SimNet(seed=707)
    net.bootstrap_network(12)
    net.run()
    old, young = net.order[3], net.order[7]
    t0 = net.clock + 1_000
    net.at(t0, lambda: net.release(old))
    net.at(t0 + HOUR_MS, lambda: net.release(young))
    # just past 24 h for the first release; the second has been offline 23 h
    net.run(until=t0 + 24 * HOUR_MS + 2 * 60_000)
    survivors = [n for n in net.live_nodes()]
    old_present = sum(old.peer_id in n.table for n in survivors)
    young_holders = [n for n in survivors if young.peer_id in n.table]
    young_offline = all(not n.table.get(young.peer_id).online for n in young_holders)
    ok = old_present == 0 and len(young_holders) > 0 and young_offline
    criterion(7, "24 h offline expiry", ok,
              f"offline > 24 h still held by {old_present} peers; offline 23 h held (offline) "
              f"by {len(young_holders)} peers")


def test_08_loss_resilience(criterion):
    trace = []
    s = Scenario(n_peers=100, seed=808, loss=0.10, random_calls=40, media_per_call=5)
    m = run_scenario(s, trace=trace)
    joins_ok = m["joins"]["ok"]
    mini_sends = [e for e in trace if e["ev"] == "send" and e["kind"] == "MINI"]
    mini_rtx = len(mini_sends) - m["calls"]["media_sent"]
    # any ACK a peer emits while handling a received mini frame directly follows that receive
    mini_acks = 0
    for i, e in enumerate(trace):
        if e["ev"] == "recv" and e["kind"] == "MINI":
            for f in trace[i + 1:]:
                if f["ev"] != "send" or f["src"] != e["dst"] or f["t"] != e["t"]:
                    break
                mini_acks += f["kind"] == "ACK"
    ok = joins_ok == 100 and m["joins"]["failed"] == 0 and mini_rtx == 0 and mini_acks == 0 \
        and len(mini_sends) > 0
    criterion(8, "10% loss resilience", ok,
              f"joins {joins_ok}/100 with 4 retries; {len(mini_sends)} mini frames, "
              f"{mini_rtx} retransmitted, {mini_acks} acked")


def _random_frame(rng):
    if rng.random() < 0.2:
        return MiniFrame(rng.randint(0, 0x7FFF), rng.randint(0, 0xFFFF), rng.randbytes(rng.randint(0, 160)))
    body = tuple(InformationElement(rng.randint(0, 255), rng.randbytes(rng.randint(0, 255)))
                 for _ in range(rng.randint(0, 5)))
    return FullFrame(rng.randint(0, 0x7FFF), rng.randint(0, 0x7FFF), rng.choice(list(MessageKind)),
                     rng.getrandbits(32), rng.getrandbits(8), rng.getrandbits(8), rng.random() < 0.5, body)


def test_09_codec(criterion):
    rng = random.Random(909)
    bad = 0
    for _ in range(100_000):
        f = _random_frame(rng)
        data = encode_frame(f)
        back = decode_frame(data)
        bad += back != f or encode_frame(back) != data
    stored = json.loads((FIXTURES / "golden_frames.json").read_text())
    golden_ok = golden_vectors() == stored
    criterion(9, "codec round-trip and golden vectors", bad == 0 and golden_ok,
              f"100000 frames, {bad} mismatches; golden vectors {'match' if golden_ok else 'DIFFER'}")


def test_10_determinism(criterion):
    s = Scenario(n_peers=60, seed=1010, loss=0.05, random_lookups=50, random_resolves=20,
                 random_calls=20, media_per_call=3,
                 release_schedule=[[100_000, 5], [101_000, 9]],
                 crash_schedule=[[102_000, 11]])
    a = metrics_json(run_scenario(s))
    b = metrics_json(run_scenario(Scenario.from_dict(s.to_dict())))
    criterion(10, "determinism", a == b,
              f"two runs with seed 1010: {'byte-identical' if a == b else 'differ'} ({len(a)} bytes)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
