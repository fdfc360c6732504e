import random

import pytest

from iaxkad.errors import SelfContactError
from iaxkad.identity import HOUR_MS, KademliaParams
from iaxkad.routing import (
    DISCARDED,
    INSERTED,
    OFFLINE,
    SPLIT_INSERTED,
    UPDATED,
    Contact,
    RoutingTable,
)

EP = ("10.0.0.1", 4569)


def contact(pid, port=4569):
    return Contact(pid, ("10.0.0.1", port))


def brute_closest(table, target, count):
    ids = sorted((c.peer_id for c in table.all_contacts()), key=lambda p: p ^ target)
    return ids[:count]


def test_self_is_never_stored(small_params):
    t = RoutingTable(0x1234, small_params)
    with pytest.raises(SelfContactError):
        t.observe_contact(contact(0x1234), 0)


def test_insert_update_moves_to_tail(small_params):
    t = RoutingTable(0, small_params)
    assert t.observe_contact(contact(0x8000), 1) == INSERTED
    assert t.observe_contact(contact(0x8001), 2) == INSERTED
    assert t.observe_contact(contact(0x8000, 5000), 3) == UPDATED
    leaf = t.leaves[t.leaf_for(0x8000)]
    assert [c.peer_id for c in leaf] == [0x8001, 0x8000]
    assert t.get(0x8000).endpoint == ("10.0.0.1", 5000)


def test_tip_splits_and_far_leaf_discards(small_params):
    t = RoutingTable(0, small_params)
    far = [0x8000 + i for i in range(4)]
    for i, pid in enumerate(far):
        t.observe_contact(contact(pid), i)
    # fifth far contact forces the root to split, but the far half is still full
    assert t.observe_contact(contact(0x8004), 10) == DISCARDED
    assert t.depth == 1
    assert t.observe_contact(contact(0x0001), 11) == INSERTED
    assert not t.check_invariants()


def test_split_reports_split_inserted(small_params):
    t = RoutingTable(0, small_params)
    for pid in (0x8000, 0x8001, 0x4000, 0x4001):
        t.observe_contact(contact(pid), 0)
    assert t.observe_contact(contact(0x0001), 1) == SPLIT_INSERTED
    assert not t.check_invariants()


def test_offline_contact_is_evicted_for_newcomer(small_params):
    t = RoutingTable(0, small_params)
    for pid in (0x8000, 0x8001, 0x8002, 0x8003, 0x0001):
        t.observe_contact(contact(pid), 0)
    t.mark_offline(0x8002, 100)
    t.mark_offline(0x8001, 200)
    assert t.observe_contact(contact(0x8009), 300) == INSERTED
    assert 0x8002 not in t and 0x8001 in t and 0x8009 in t


def test_mark_offline_keeps_first_timestamp(small_params):
    t = RoutingTable(0, small_params)
    t.observe_contact(contact(0x8000), 0)
    assert t.mark_offline(0x8000, 10)
    assert t.mark_offline(0x8000, 20)
    c = t.get(0x8000)
    assert c.status == OFFLINE and c.offline_since == 10
    assert not t.mark_offline(0x1111, 0)
    assert t.closest_contacts(0x8000, 4) == []
    assert t.closest_contacts(0x8000, 4, include_offline=True) == [c]


def test_purge_boundary():
    p = KademliaParams(bits=16, k=4)
    t = RoutingTable(0, p)
    t.observe_contact(contact(0x8000), 0)
    t.mark_offline(0x8000, 0)
    assert t.purge_expired(24 * HOUR_MS) == []
    assert t.purge_expired(24 * HOUR_MS + 1) == [0x8000]


def test_closest_matches_brute_force():
    rng = random.Random(5)
    p = KademliaParams(bits=32, k=8)
    t = RoutingTable(rng.getrandbits(32), p)
    for _ in range(2000):
        pid = rng.getrandbits(32)
        if pid != t.local_id:
            t.observe_contact(contact(pid), 0)
    assert not t.check_invariants()
    for _ in range(300):
        target = rng.getrandbits(32)
        n = rng.randint(1, 30)
        got = [c.peer_id for c in t.closest_contacts(target, n)]
        assert got == brute_closest(t, target, n)
    with pytest.raises(ValueError):
        t.closest_contacts(0, 0)


def test_refresh_targets_land_in_far_leaves():
    rng = random.Random(8)
    p = KademliaParams(bits=16, k=2)
    t = RoutingTable(0x0F0F, p)
    for _ in range(200):
        pid = rng.getrandbits(16)
        if pid != t.local_id:
            t.observe_contact(contact(pid), 0)
    first = t.leaves[-1].contacts[0].peer_id if len(t.leaves[-1]) else t.leaves[-2].contacts[0].peer_id
    keys = t.refresh_targets(first, rng)
    assert len(keys) == t.leaf_for(first)
    for j, key in enumerate(keys):
        assert t.leaf_for(key) == j


def test_dump_format(small_params):
    t = RoutingTable(0, small_params)
    t.observe_contact(contact(0x8000), 42)
    assert t.dump() == "8000 10.0.0.1:4569 online 42"


def test_random_operation_sequence_keeps_invariants():
    rng = random.Random(11)
    t = RoutingTable(rng.getrandbits(12), KademliaParams(bits=12, k=3))
    now = 0
    for _ in range(3000):
        now += rng.randint(0, 2 * HOUR_MS)
        pid = rng.getrandbits(12)
        r = rng.random()
        if r < 0.7 and pid != t.local_id:
            t.observe_contact(contact(pid), now)
        elif r < 0.9 and len(t):
            t.mark_offline(rng.choice(t.all_contacts(True)).peer_id, now)
        else:
            t.purge_expired(now)
        assert t.check_invariants() == []
