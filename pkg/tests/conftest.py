"""Shared fixtures and independent reference builders.

The encoders and capture builders here are written from the wire format
definitions directly (hand-packed structs), independent of the package
encoders, so round-trip and dissection tests check two routes.
"""

from __future__ import annotations

import random
import struct

import pytest

from quicwatch.wire import PacketRecord, Proto

# --- independent QUIC reference encoder --------------------------------------

TYPE_BITS = {"initial": 0, "zero_rtt": 1, "handshake": 2, "retry": 3}


def varint_ref(value: int) -> bytes:
    if value < 2**6:
        return bytes([value])
    if value < 2**14:
        return ((1 << 14) | value).to_bytes(2, "big")
    if value < 2**30:
        return ((2 << 30) | value).to_bytes(4, "big")
    return ((3 << 62) | value).to_bytes(8, "big")


def encode_long_header_ref(
    type_name: str,
    version: int,
    dcid: bytes,
    scid: bytes,
    token: bytes = b"",
    payload: bytes = b"\x00\x01\x02\x03",
) -> bytes:
    """Reference long-header encoder: 0b11TT0000 first byte, 1-byte PN."""
    buf = bytearray()
    buf.append(0b1100_0000 | (TYPE_BITS[type_name] << 4))
    buf += version.to_bytes(4, "big")
    buf.append(len(dcid))
    buf += dcid
    buf.append(len(scid))
    buf += scid
    if type_name == "initial":
        buf += varint_ref(len(token))
        buf += token
    if type_name == "retry":
        buf += token + bytes(16)  # opaque token + integrity tag
    else:
        buf += varint_ref(1 + len(payload))
        buf.append(0)  # packet number
        buf += payload
    return bytes(buf)


def random_valid_header(rng: random.Random) -> tuple[str, int, bytes, bytes, bytes]:
    type_name = rng.choice(("initial", "zero_rtt", "handshake", "retry"))
    dcid = rng.randbytes(rng.randint(0, 20))
    scid = rng.randbytes(rng.randint(0, 20))
    token = rng.randbytes(rng.randint(0, 32)) if type_name in ("initial", "retry") else b""
    payload = rng.randbytes(rng.randint(0, 48))
    return type_name, 1, dcid, scid, token, payload


# --- independent pcap builder -------------------------------------------------


def pcap_bytes(frames: list[tuple[int, bytes]], linktype: int = 1) -> bytes:
    """Classic big-endian pcap with (ts_us, frame) entries."""
    out = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, linktype)
    for ts_us, frame in frames:
        out += struct.pack(">IIII", ts_us // 1_000_000, ts_us % 1_000_000, len(frame), len(frame))
        out += frame
    return out


def eth_frame(payload: bytes, ethertype: int = 0x0800) -> bytes:
    return b"\x02" * 6 + b"\x04" * 6 + ethertype.to_bytes(2, "big") + payload


def ipv4_packet(proto: int, src: str, dst: str, body: bytes) -> bytes:
    total = 20 + len(body)
    header = struct.pack(
        ">BBHHHBBH4s4s",
        0x45,
        0,
        total,
        0,
        0,
        64,
        proto,
        0,
        bytes(int(x) for x in src.split(".")),
        bytes(int(x) for x in dst.split(".")),
    )
    return header + body


def udp_segment(sport: int, dport: int, payload: bytes) -> bytes:
    return struct.pack(">HHHH", sport, dport, 8 + len(payload), 0) + payload


def tcp_segment(sport: int, dport: int, flag_letters: str) -> bytes:
    wire_flags = 0
    for letter, bit in (("F", 0x01), ("S", 0x02), ("R", 0x04), ("A", 0x10)):
        if letter in flag_letters:
            wire_flags |= bit
    return struct.pack(">HHIIBBHHH", sport, dport, 0, 0, 5 << 4, wire_flags, 8192, 0, 0)


def icmp_message(icmp_type: int) -> bytes:
    return struct.pack(">BBHI", icmp_type, 0, 0, 0)


def udp_frame(ts_us: int, src: str, sport: int, dst: str, dport: int, payload: bytes = b"") -> tuple[int, bytes]:
    return ts_us, eth_frame(ipv4_packet(17, src, dst, udp_segment(sport, dport, payload)))


def tcp_frame(ts_us: int, src: str, sport: int, dst: str, dport: int, flags: str) -> tuple[int, bytes]:
    return ts_us, eth_frame(ipv4_packet(6, src, dst, tcp_segment(sport, dport, flags)))


def icmp_frame(ts_us: int, src: str, dst: str, icmp_type: int) -> tuple[int, bytes]:
    return ts_us, eth_frame(ipv4_packet(1, src, dst, icmp_message(icmp_type)))


def arp_frame(ts_us: int) -> tuple[int, bytes]:
    return ts_us, eth_frame(b"\x00" * 28, ethertype=0x0806)


# --- synthetic packet streams ---------------------------------------------------


def response_packet(ts_us: int, src: str, dst: str = "192.0.2.9", dport: int = 40000, payload: bytes = b"") -> PacketRecord:
    return PacketRecord(ts_us, src, dst, Proto.UDP, 443, dport, ip_len=28 + len(payload), payload=payload)


def random_trace(rng: random.Random, n_sources: int, n_packets: int, span_secs: int = 12 * 3600) -> list[PacketRecord]:
    """ts-sorted response-direction packets over random sources."""
    sources = [f"10.{i // 256}.{i % 256}.7" for i in range(n_sources)]
    packets = [
        response_packet(
            rng.randrange(span_secs * 1_000_000),
            rng.choice(sources),
            dport=rng.randrange(1024, 65535),
        )
        for _ in range(n_packets)
    ]
    packets.sort(key=lambda p: p.ts)
    return packets


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xBEEF)
