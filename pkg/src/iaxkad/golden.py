"""Reference frames whose encodings are pinned byte-for-byte."""
from __future__ import annotations

from .wire import FullFrame, MessageKind, MiniFrame, encode_frame

GOLDEN_FRAMES = {
    "regack_5_9": FullFrame(source_call=5, dest_call=9, kind=MessageKind.REGACK,
                            timestamp_ms=0, oseqno=0, iseqno=1),
    "mini_5_1234_ab": MiniFrame(source_call=5, timestamp_low=0x1234, payload=b"ab"),
}


def golden_vectors() -> dict[str, str]:
    return {name: encode_frame(frame).hex() for name, frame in GOLDEN_FRAMES.items()}
