"""K-bucket routing table organised as a binary prefix tree.

Only the leaf covering the local id may split, so the tree is a spine: leaf
``j`` (``j < depth``) holds the ids sharing exactly ``j`` leading bits with the
local id, and the spine tip holds everything sharing at least ``depth`` bits.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterator

from .errors import SelfContactError
from .identity import KademliaParams, PeerId, peer_id_hex

ONLINE = "online"
OFFLINE = "offline"

INSERTED = "inserted"
UPDATED = "updated"
SPLIT_INSERTED = "split_inserted"
DISCARDED = "discarded"

Endpoint = tuple  # (host, port)


@dataclass(eq=False)
class Contact:
    peer_id: PeerId
    endpoint: Endpoint
    status: str = ONLINE
    last_seen: int = 0
    offline_since: int | None = None

    @property
    def online(self) -> bool:
        return self.status == ONLINE


def format_endpoint(endpoint: Endpoint) -> str:
    host, port = endpoint
    return f"{host}:{port}"


class KBucket:
    """Contacts of one leaf, least-recently-seen first."""

    def __init__(self, prefix: int, prefix_len: int):
        self.prefix = prefix
        self.prefix_len = prefix_len
        self.contacts: list[Contact] = []

    def __len__(self):
        return len(self.contacts)

    def __iter__(self) -> Iterator[Contact]:
        return iter(self.contacts)

    def covers(self, peer_id: PeerId, bits: int) -> bool:
        return peer_id >> (bits - self.prefix_len) == self.prefix

    def id_range(self, bits: int) -> tuple[int, int]:
        shift = bits - self.prefix_len
        return self.prefix << shift, (self.prefix + 1) << shift

    def find(self, peer_id: PeerId) -> int:
        for i, c in enumerate(self.contacts):
            if c.peer_id == peer_id:
                return i
        return -1

    def discard(self, contact: Contact):
        for i, c in enumerate(self.contacts):
            if c is contact:
                del self.contacts[i]
                return


class RoutingTable:
    def __init__(self, local_id: PeerId, params: KademliaParams):
        self.local_id = local_id
        self.params = params
        self.bits = params.bits
        # leaves[j] for j < depth are the off-path siblings; leaves[depth] is the tip.
        self.leaves: list[KBucket] = [KBucket(0, 0)]
        self._index: dict[PeerId, Contact] = {}

    @property
    def depth(self) -> int:
        return len(self.leaves) - 1

    def __len__(self):
        return len(self._index)

    def __contains__(self, peer_id: PeerId) -> bool:
        return peer_id in self._index

    def get(self, peer_id: PeerId) -> Contact | None:
        return self._index.get(peer_id)

    def _common_prefix(self, peer_id: PeerId) -> int:
        return self.bits - (self.local_id ^ peer_id).bit_length()

    def leaf_for(self, peer_id: PeerId) -> int:
        return min(self._common_prefix(peer_id), self.depth)

    def _split_tip(self):
        tip = self.leaves[-1]
        depth = self.depth
        bit = (self.local_id >> (self.bits - depth - 1)) & 1
        sibling = KBucket((tip.prefix << 1) | (bit ^ 1), depth + 1)
        new_tip = KBucket((tip.prefix << 1) | bit, depth + 1)
        for c in tip.contacts:
            (new_tip if new_tip.covers(c.peer_id, self.bits) else sibling).contacts.append(c)
        self.leaves[-1] = sibling
        self.leaves.append(new_tip)

    def observe_contact(self, contact: Contact, now: int) -> str:
        """Record that ``contact`` was heard from at ``now``."""
        pid = contact.peer_id
        if pid == self.local_id:
            raise SelfContactError("the local id is never stored as a contact")
        existing = self._index.get(pid)
        if existing is not None:
            leaf = self.leaves[self.leaf_for(pid)]
            leaf.discard(existing)
            existing.endpoint = contact.endpoint
            existing.status = ONLINE
            existing.offline_since = None
            existing.last_seen = now
            leaf.contacts.append(existing)
            return UPDATED

        stored = Contact(pid, contact.endpoint, ONLINE, now, None)
        split = False
        while True:
            j = self.leaf_for(pid)
            leaf = self.leaves[j]
            if len(leaf) < self.params.k:
                leaf.contacts.append(stored)
                self._index[pid] = stored
                return SPLIT_INSERTED if split else INSERTED
            if j == self.depth and self.depth < self.bits:
                self._split_tip()
                split = True
                continue
            break

        # Full leaf that cannot split: an online newcomer displaces the oldest offline entry.
        offline = [c for c in leaf.contacts if not c.online]
        if not offline:
            return DISCARDED
        victim = min(offline, key=lambda c: (c.offline_since, c.last_seen))
        leaf.discard(victim)
        del self._index[victim.peer_id]
        leaf.contacts.append(stored)
        self._index[pid] = stored
        return INSERTED

    def mark_offline(self, peer_id: PeerId, now: int) -> bool:
        c = self._index.get(peer_id)
        if c is None:
            return False
        if c.online:
            c.status = OFFLINE
            c.offline_since = now
        return True

    def remove(self, peer_id: PeerId) -> bool:
        c = self._index.pop(peer_id, None)
        if c is None:
            return False
        self.leaves[self.leaf_for(peer_id)].discard(c)
        return True

    def purge_expired(self, now: int) -> list[PeerId]:
        expiry = self.params.offline_expiry_ms
        removed = [
            c.peer_id
            for c in self._index.values()
            if not c.online and now - c.offline_since > expiry
        ]
        for pid in removed:
            self.remove(pid)
        return removed

    def has_offline(self) -> bool:
        return any(not c.online for c in self._index.values())

    def all_contacts(self, include_offline: bool = False) -> list[Contact]:
        return [
            c
            for leaf in self.leaves
            for c in leaf.contacts
            if include_offline or c.online
        ]

    def _leaf_min_distance(self, j: int, target: PeerId) -> int:
        leaf = self.leaves[j]
        shift = self.bits - leaf.prefix_len
        return ((target >> shift) ^ leaf.prefix) << shift

    def closest_contacts(
        self, target: PeerId, count: int, include_offline: bool = False
    ) -> list[Contact]:
        """Up to ``count`` contacts in ascending XOR distance from ``target``.

        Leaves are visited nearest-range first; the walk stops once the next
        leaf cannot beat the current ``count``-th best.
        """
        if count < 1:
            raise ValueError("count must be >= 1")
        order = sorted(range(len(self.leaves)), key=lambda j: self._leaf_min_distance(j, target))
        best: list[tuple[int, PeerId, Contact]] = []
        for j in order:
            if len(best) >= count and self._leaf_min_distance(j, target) > -best[0][0]:
                break
            for c in self.leaves[j].contacts:
                if not (include_offline or c.online):
                    continue
                item = (-(c.peer_id ^ target), c.peer_id, c)
                if len(best) < count:
                    heapq.heappush(best, item)
                elif item[0] > best[0][0]:
                    heapq.heapreplace(best, item)
        best.sort(key=lambda item: -item[0])
        return [c for _, _, c in best]

    def refresh_targets(self, first_contact_id: PeerId, rng) -> list[PeerId]:
        """One random key inside every leaf farther from us than ``first_contact_id``'s leaf."""
        if first_contact_id == self.local_id:
            raise SelfContactError("first contact cannot be the local node")
        limit = self.leaf_for(first_contact_id)
        keys = []
        for j in range(limit):
            leaf = self.leaves[j]
            free_bits = self.bits - leaf.prefix_len
            suffix = rng.getrandbits(free_bits) if free_bits else 0
            keys.append((leaf.prefix << free_bits) | suffix)
        return keys

    def dump(self) -> str:
        lines = []
        for c in self.all_contacts(include_offline=True):
            lines.append(
                f"{peer_id_hex(c.peer_id, self.bits)} {format_endpoint(c.endpoint)} "
                f"{c.status} {c.last_seen}"
            )
        return "\n".join(lines)

    def check_invariants(self) -> list[str]:
        """Return human-readable descriptions of every violated structural invariant."""
        problems = []
        seen = set()
        for j, leaf in enumerate(self.leaves):
            if len(leaf) > self.params.k:
                problems.append(f"leaf {j} holds {len(leaf)} > k contacts")
            for c in leaf.contacts:
                if c.peer_id == self.local_id:
                    problems.append("local id stored as a contact")
                if not leaf.covers(c.peer_id, self.bits):
                    problems.append(f"contact {c.peer_id:x} outside leaf {j}")
                if c.peer_id in seen:
                    problems.append(f"duplicate contact {c.peer_id:x}")
                seen.add(c.peer_id)
                if (c.status == OFFLINE) != (c.offline_since is not None):
                    problems.append(f"status/offline_since mismatch for {c.peer_id:x}")
        if seen != set(self._index):
            problems.append("index out of sync with leaves")
        if not self.leaves[-1].covers(self.local_id, self.bits):
            problems.append("tip leaf does not cover the local id")
        return problems
