import random

import pytest

from rtmfpsim import wire


class PacketSniffer:
    """Link observer recording every send attempt with its outcome."""

    def __init__(self):
        self.records = []  # (now, dgram, outcome, deliver_at, packet|None)

    def __call__(self, now, dgram, outcome, deliver_at):
        try:
            pkt = wire.decode(dgram.payload)
        except wire.DecodeError:
            pkt = None
        self.records.append((now, dgram, outcome, deliver_at, pkt))

    def packets(self):
        return [(now, pkt, outcome) for now, _, outcome, _, pkt in self.records
                if pkt is not None]

    def data_packets(self):
        return [(now, pkt, outcome) for now, pkt, outcome in self.packets()
                if any(isinstance(c, wire.DataChunk) for c in pkt.chunks)]

    def handshake_packets(self):
        return [(now, pkt, outcome) for now, pkt, outcome in self.packets()
                if any(isinstance(c, wire.HandshakeChunk) for c in pkt.chunks)]


@pytest.fixture
def sniffer():
    return PacketSniffer()


def random_packet(rng: random.Random) -> wire.Packet:
    """A structurally valid packet with a random mix of chunk kinds."""
    n = rng.randint(1, 9)
    chunks = []
    for _ in range(n):
        kind = rng.choice(("data", "data", "data", "ack", "hs", "close"))
        if kind == "data":
            size = rng.randint(1, 1450)
            chunks.append(wire.DataChunk(
                flow_id=rng.randint(0, 0xFFFF),
                seq=rng.randint(0, 0xFFFFFFFF),
                frag=rng.choice((wire.FRAG_WHOLE, wire.FRAG_FIRST,
                                 wire.FRAG_MIDDLE, wire.FRAG_LAST)),
                time_critical=rng.random() < 0.5,
                payload=rng.randbytes(size)))
        elif kind == "ack":
            cum = rng.randint(0, 1 << 20)
            gaps = []
            lo = cum + 2
            for _ in range(rng.randint(0, 5)):
                hi = lo + rng.randint(0, 9)
                gaps.append((lo, hi))
                lo = hi + 2
            chunks.append(wire.AckChunk(
                flow_id=rng.randint(0, 0xFFFF), cum_ack=cum, gaps=gaps,
                adv_buffer=rng.randint(0, 1 << 24)))
        elif kind == "hs":
            chunks.append(wire.HandshakeChunk(
                kind=rng.choice(wire.HANDSHAKE_TYPES),
                epd=rng.randint(0, 0xFFFFFFFF),
                sid=rng.randint(0, 0xFFFFFFFF),
                cookie=rng.randbytes(64)))
        else:
            chunks.append(wire.CloseChunk())
    return wire.Packet(
        session_id=rng.randint(0, 0xFFFFFFFF),
        flags=rng.randint(0, 3),
        timestamp=rng.randint(0, 0xFFFF),
        ts_echo=rng.randint(0, 0xFFFF),
        chunks=chunks)
