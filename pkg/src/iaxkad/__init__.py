"""IAX signaling over a Kademlia overlay: protocol engine and deterministic simulator."""
from .engine import Completion, LookupResult, PeerNode
from .identity import (
    KademliaParams,
    bucket_index,
    closer,
    derive_peer_id,
    peer_id_hex,
    xor_distance,
)
from .routing import Contact, RoutingTable
from .sim import LinkModel, Scenario, SimNet, measure_scaling, run_scenario
from .wire import FullFrame, MessageKind, MiniFrame, decode_frame, encode_frame

__all__ = [
    "Completion", "Contact", "FullFrame", "KademliaParams", "LinkModel", "LookupResult",
    "MessageKind", "MiniFrame", "PeerNode", "RoutingTable", "Scenario", "SimNet",
    "bucket_index", "closer", "decode_frame", "derive_peer_id", "encode_frame",
    "measure_scaling", "peer_id_hex", "run_scenario", "xor_distance",
]
