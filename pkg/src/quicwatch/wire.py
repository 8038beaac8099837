"""Capture ingestion and QUIC long-header dissection.

Reads pcap (classic libpcap, Ethernet/IPv4) or ndjson captures into
PacketRecords, and dissects QUIC long headers following the invariant
layout: form bit, version, length-prefixed connection IDs. Only the
version-1 type-bit mapping is decoded; other versions still yield
version and CIDs. Encrypted payloads are never inspected beyond packet
framing.
"""

from __future__ import annotations

import heapq
import json
import logging
import struct
from dataclasses import dataclass, field
from enum import Enum, IntFlag
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

QUIC_PORT = 443
MAX_CID_LEN = 20

# Out-of-order pcap timestamps are buffered and sorted within this window;
# records arriving later than the window are dropped and counted.
REORDER_WINDOW_US = 10_000_000

_FORM_BIT = 0x80
_V1_TYPE_NAMES = ("initial", "zero_rtt", "handshake", "retry")


class IngestError(Exception):
    """Capture file unreadable or structurally invalid."""


class Proto(str, Enum):
    UDP = "udp"
    TCP = "tcp"
    ICMP = "icmp"


class TcpFlags(IntFlag):
    NONE = 0
    SYN = 0x1
    ACK = 0x2
    RST = 0x4
    FIN = 0x8


_FLAG_LETTERS = (("S", TcpFlags.SYN), ("A", TcpFlags.ACK), ("R", TcpFlags.RST), ("F", TcpFlags.FIN))


def flags_from_letters(s: str) -> TcpFlags:
    flags = TcpFlags.NONE
    for letter, bit in _FLAG_LETTERS:
        if letter in s:
            flags |= bit
    return flags


def flags_to_letters(flags: TcpFlags) -> str:
    return "".join(letter for letter, bit in _FLAG_LETTERS if flags & bit)


def ip_to_int(ip: str) -> int:
    """Strict dotted-quad to integer; raises ValueError on anything else."""
    parts = ip.split(".")
    if len(parts) != 4:
        raise ValueError(f"not a dotted quad: {ip!r}")
    value = 0
    for part in parts:
        if not part.isdigit() or (len(part) > 1 and part[0] == "0") or int(part) > 255:
            raise ValueError(f"not a dotted quad: {ip!r}")
        value = (value << 8) | int(part)
    return value


def int_to_ip(value: int) -> str:
    return ".".join(str((value >> shift) & 0xFF) for shift in (24, 16, 8, 0))


@dataclass(slots=True)
class PacketRecord:
    """One captured datagram/segment. ts is microseconds since epoch."""

    ts: int
    src_ip: str
    dst_ip: str
    proto: Proto
    src_port: int = 0
    dst_port: int = 0
    tcp_flags: TcpFlags = TcpFlags.NONE
    icmp_type: int | None = None
    ip_len: int = 0
    payload: bytes = b""


class PacketType(Enum):
    INITIAL = "initial"
    ZERO_RTT = "zero_rtt"
    HANDSHAKE = "handshake"
    RETRY = "retry"
    VERSION_NEGOTIATION = "version_negotiation"
    SHORT_HEADER_OR_UNKNOWN = "short_header_or_unknown"


@dataclass(slots=True)
class QuicHeader:
    packet_type: PacketType
    version: int
    dcid: bytes
    scid: bytes
    coalesced_following: bool = False


@dataclass(slots=True)
class ParseFailure:
    """Payload could not be framed (distinct from a short/unknown header)."""

    reason: str


@dataclass(slots=True)
class QuicMessageCount:
    initial: int = 0
    handshake: int = 0
    retry: int = 0
    version_negotiation: int = 0
    other: int = 0

    def __add__(self, other: "QuicMessageCount") -> "QuicMessageCount":
        return QuicMessageCount(
            self.initial + other.initial,
            self.handshake + other.handshake,
            self.retry + other.retry,
            self.version_negotiation + other.version_negotiation,
            self.other + other.other,
        )

    def total(self) -> int:
        return self.initial + self.handshake + self.retry + self.version_negotiation + self.other

    def as_dict(self) -> dict[str, int]:
        return {
            "initial": self.initial,
            "handshake": self.handshake,
            "retry": self.retry,
            "version_negotiation": self.version_negotiation,
            "other": self.other,
        }


# --- QUIC long-header framing -----------------------------------------------


def _decode_varint(buf: bytes, pos: int) -> tuple[int, int] | None:
    """RFC 9000 variable-length integer; None when truncated."""
    if pos >= len(buf):
        return None
    length = 1 << (buf[pos] >> 6)
    if pos + length > len(buf):
        return None
    value = buf[pos] & 0x3F
    for i in range(1, length):
        value = (value << 8) | buf[pos + i]
    return value, pos + length


def encode_varint(value: int) -> bytes:
    if value < 0x40:
        return bytes([value])
    if value < 0x4000:
        return struct.pack(">H", 0x4000 | value)
    if value < 0x40000000:
        return struct.pack(">I", 0x80000000 | value)
    return struct.pack(">Q", 0xC000000000000000 | value)


def _parse_one(payload: bytes, pos: int) -> tuple[QuicHeader | ParseFailure, int | None]:
    """Parse one QUIC packet starting at pos.

    Returns (header-or-failure, end offset). The end offset is the first
    byte after the packet, or None when the packet is not self-delimiting
    (Retry, Version Negotiation, short headers, non-v1 versions, or a
    truncated length field).
    """
    first = payload[pos]
    if not first & _FORM_BIT:
        return QuicHeader(PacketType.SHORT_HEADER_OR_UNKNOWN, 0, b"", b""), None

    if pos + 6 > len(payload):
        return ParseFailure("truncated before version"), None
    version = struct.unpack_from(">I", payload, pos + 1)[0]

    cur = pos + 5
    dcid_len = payload[cur]
    if dcid_len > MAX_CID_LEN:
        return ParseFailure("dcid length exceeds 20"), None
    cur += 1
    if cur + dcid_len + 1 > len(payload):
        return ParseFailure("truncated in destination connection id"), None
    dcid = payload[cur : cur + dcid_len]
    cur += dcid_len
    scid_len = payload[cur]
    if scid_len > MAX_CID_LEN:
        return ParseFailure("scid length exceeds 20"), None
    cur += 1
    if cur + scid_len > len(payload):
        return ParseFailure("truncated in source connection id"), None
    scid = payload[cur : cur + scid_len]
    cur += scid_len

    if version == 0:
        # Version negotiation consumes the rest of the datagram.
        return QuicHeader(PacketType.VERSION_NEGOTIATION, 0, dcid, scid), None
    if version != 1:
        return QuicHeader(PacketType.SHORT_HEADER_OR_UNKNOWN, version, dcid, scid), None

    packet_type = PacketType(_V1_TYPE_NAMES[(first >> 4) & 0x3])
    if packet_type is PacketType.RETRY:
        return QuicHeader(PacketType.RETRY, version, dcid, scid), None

    if packet_type is PacketType.INITIAL:
        decoded = _decode_varint(payload, cur)
        if decoded is None:
            return QuicHeader(packet_type, version, dcid, scid), None
        token_len, cur = decoded
        if cur + token_len > len(payload):
            return QuicHeader(packet_type, version, dcid, scid), None
        cur += token_len

    decoded = _decode_varint(payload, cur)
    if decoded is None:
        return QuicHeader(packet_type, version, dcid, scid), None
    length, cur = decoded
    end = cur + length
    if end > len(payload):
        return QuicHeader(packet_type, version, dcid, scid), None
    return QuicHeader(packet_type, version, dcid, scid), end


def parse_long_header(payload: bytes) -> QuicHeader | ParseFailure:
    """Dissect the first QUIC packet of a datagram.

    Never reads past the payload; truncation inside the connection-ID
    fields yields a ParseFailure, a clear form bit yields
    SHORT_HEADER_OR_UNKNOWN with empty connection IDs.
    """
    if not payload:
        return ParseFailure("empty payload")
    header, end = _parse_one(payload, 0)
    if isinstance(header, QuicHeader) and end is not None:
        header.coalesced_following = end < len(payload) and bool(payload[end] & _FORM_BIT)
    return header


def count_messages(payload: bytes) -> QuicMessageCount:
    """Tally coalesced QUIC messages in one datagram by type.

    Walks long-header packets via their length fields; the first
    short-header or unparsable remainder is tallied once under `other`
    and the walk stops.
    """
    counts = QuicMessageCount()
    pos = 0
    while pos < len(payload):
        header, end = _parse_one(payload, pos)
        if isinstance(header, ParseFailure):
            counts.other += 1
            break
        if header.packet_type is PacketType.INITIAL:
            counts.initial += 1
        elif header.packet_type is PacketType.HANDSHAKE:
            counts.handshake += 1
        elif header.packet_type is PacketType.RETRY:
            counts.retry += 1
        elif header.packet_type is PacketType.VERSION_NEGOTIATION:
            counts.version_negotiation += 1
        else:
            counts.other += 1
        if end is None or end <= pos:
            break
        pos = end
    return counts


# --- encoding helpers (trace synthesis) --------------------------------------


def build_long_header_packet(
    packet_type: PacketType,
    dcid: bytes,
    scid: bytes,
    version: int = 1,
    token: bytes = b"",
    payload: bytes = b"\x00" * 16,
) -> bytes:
    """Encode one version-1 long-header packet (1-byte packet number)."""
    type_bits = _V1_TYPE_NAMES.index(packet_type.value)
    out = bytearray([0xC0 | (type_bits << 4)])
    out += struct.pack(">I", version)
    out.append(len(dcid))
    out += dcid
    out.append(len(scid))
    out += scid
    if packet_type is PacketType.INITIAL:
        out += encode_varint(len(token))
        out += token
    if packet_type is PacketType.RETRY:
        out += token  # retry token + opaque integrity tag, no length field
    else:
        out += encode_varint(1 + len(payload))
        out.append(0)  # packet number
        out += payload
    return bytes(out)


def build_version_negotiation(dcid: bytes, scid: bytes, versions: Iterable[int]) -> bytes:
    out = bytearray([0xC0])
    out += struct.pack(">I", 0)
    out.append(len(dcid))
    out += dcid
    out.append(len(scid))
    out += scid
    for v in versions:
        out += struct.pack(">I", v)
    return bytes(out)


def build_short_header(payload: bytes = b"\x01") -> bytes:
    return bytes([0x40]) + payload


# --- ingest -------------------------------------------------------------------


@dataclass(slots=True)
class IngestStats:
    frames: int = 0
    records: int = 0
    skipped_non_ipv4: int = 0
    skipped_non_transport: int = 0
    skipped_fragments: int = 0
    malformed: int = 0
    late_dropped: int = 0

    @property
    def skipped(self) -> int:
        return (
            self.skipped_non_ipv4
            + self.skipped_non_transport
            + self.skipped_fragments
            + self.malformed
        )

    def as_dict(self) -> dict[str, int]:
        return {
            "frames": self.frames,
            "records": self.records,
            "skipped_non_ipv4": self.skipped_non_ipv4,
            "skipped_non_transport": self.skipped_non_transport,
            "skipped_fragments": self.skipped_fragments,
            "malformed": self.malformed,
            "late_dropped": self.late_dropped,
        }


_PCAP_MAGICS = {
    0xA1B2C3D4: (">", 1_000),  # big endian, microseconds
    0xD4C3B2A1: ("<", 1_000),  # little endian, microseconds
    0xA1B23C4D: (">", 1),  # big endian, nanoseconds
    0x4D3CB2A1: ("<", 1),  # little endian, nanoseconds
}


class CaptureReader:
    """Iterates PacketRecords from a capture in nondecreasing ts order.

    Out-of-order records are buffered and sorted within a 10-second
    window; anything later than the window is dropped and counted in
    stats.late_dropped. stats is complete once iteration finishes.
    """

    def __init__(self, path: str, fmt: str, reorder_window_us: int = REORDER_WINDOW_US):
        if fmt not in ("pcap", "ndjson"):
            raise ValueError(f"unknown capture format: {fmt!r}")
        self.path = path
        self.fmt = fmt
        self.reorder_window_us = reorder_window_us
        self.stats = IngestStats()

    def __iter__(self) -> Iterator[PacketRecord]:
        if self.fmt == "pcap":
            raw = self._read_pcap()
        else:
            raw = self._read_ndjson()
        return self._ordered(raw)

    def _ordered(self, records: Iterator[PacketRecord]) -> Iterator[PacketRecord]:
        heap: list[tuple[int, int, PacketRecord]] = []
        max_ts = None
        seq = 0
        for rec in records:
            if max_ts is not None and rec.ts < max_ts - self.reorder_window_us:
                self.stats.late_dropped += 1
                continue
            if max_ts is None or rec.ts > max_ts:
                max_ts = rec.ts
            heapq.heappush(heap, (rec.ts, seq, rec))
            seq += 1
            while heap and heap[0][0] <= max_ts - self.reorder_window_us:
                yield heapq.heappop(heap)[2]
        while heap:
            yield heapq.heappop(heap)[2]

    def _read_pcap(self) -> Iterator[PacketRecord]:
        try:
            fh = open(self.path, "rb")
        except OSError as exc:
            raise IngestError(f"cannot open capture: {exc}") from exc
        with fh:
            head = fh.read(24)
            if len(head) < 24:
                raise IngestError("truncated pcap global header")
            magic = struct.unpack(">I", head[:4])[0]
            if magic not in _PCAP_MAGICS:
                raise IngestError(f"not a pcap file (magic 0x{magic:08x})")
            endian, ts_div = _PCAP_MAGICS[magic]
            linktype = struct.unpack(endian + "I", head[20:24])[0]
            if linktype != 1:
                raise IngestError(f"unsupported pcap link type {linktype} (Ethernet only)")
            rec_hdr = struct.Struct(endian + "IIII")
            while True:
                hdr = fh.read(16)
                if not hdr:
                    break
                if len(hdr) < 16:
                    self.stats.malformed += 1
                    break
                ts_sec, ts_frac, incl_len, _orig_len = rec_hdr.unpack(hdr)
                data = fh.read(incl_len)
                if len(data) < incl_len:
                    self.stats.malformed += 1
                    break
                self.stats.frames += 1
                rec = self._decode_ethernet(ts_sec * 1_000_000 + ts_frac // ts_div, data)
                if rec is not None:
                    self.stats.records += 1
                    yield rec

    def _decode_ethernet(self, ts: int, frame: bytes) -> PacketRecord | None:
        if len(frame) < 14 + 20:
            self.stats.malformed += 1
            return None
        if frame[12:14] != b"\x08\x00":
            self.stats.skipped_non_ipv4 += 1
            return None
        ip = frame[14:]
        ver_ihl = ip[0]
        ihl = (ver_ihl & 0x0F) * 4
        if ver_ihl >> 4 != 4 or ihl < 20 or len(ip) < ihl:
            self.stats.malformed += 1
            return None
        ip_len = struct.unpack_from(">H", ip, 2)[0]
        frag = struct.unpack_from(">H", ip, 6)[0]
        if frag & 0x1FFF:
            self.stats.skipped_fragments += 1
            return None
        proto_num = ip[9]
        src_ip = int_to_ip(struct.unpack_from(">I", ip, 12)[0])
        dst_ip = int_to_ip(struct.unpack_from(">I", ip, 16)[0])
        body = ip[ihl:]
        if proto_num == 17:
            if len(body) < 8:
                self.stats.malformed += 1
                return None
            sport, dport, udp_len = struct.unpack_from(">HHH", body, 0)
            payload = body[8 : max(8, udp_len)]
            return PacketRecord(ts, src_ip, dst_ip, Proto.UDP, sport, dport, ip_len=ip_len, payload=payload)
        if proto_num == 6:
            if len(body) < 20:
                self.stats.malformed += 1
                return None
            sport, dport = struct.unpack_from(">HH", body, 0)
            wire_flags = body[13]
            flags = TcpFlags.NONE
            if wire_flags & 0x02:
                flags |= TcpFlags.SYN
            if wire_flags & 0x10:
                flags |= TcpFlags.ACK
            if wire_flags & 0x04:
                flags |= TcpFlags.RST
            if wire_flags & 0x01:
                flags |= TcpFlags.FIN
            return PacketRecord(ts, src_ip, dst_ip, Proto.TCP, sport, dport, tcp_flags=flags, ip_len=ip_len)
        if proto_num == 1:
            if len(body) < 4:
                self.stats.malformed += 1
                return None
            return PacketRecord(ts, src_ip, dst_ip, Proto.ICMP, icmp_type=body[0], ip_len=ip_len)
        self.stats.skipped_non_transport += 1
        return None

    def _read_ndjson(self) -> Iterator[PacketRecord]:
        try:
            fh = open(self.path, "r", encoding="utf-8")
        except OSError as exc:
            raise IngestError(f"cannot open capture: {exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                self.stats.frames += 1
                try:
                    rec = _record_from_json(json.loads(line))
                except (ValueError, KeyError, TypeError) as exc:
                    self.stats.malformed += 1
                    log.warning("%s:%d: malformed record skipped (%s)", self.path, lineno, exc)
                    continue
                self.stats.records += 1
                yield rec


def _record_from_json(obj: dict) -> PacketRecord:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    ts = obj["ts_us"]
    if not isinstance(ts, int) or ts < 0:
        raise ValueError("ts_us must be a nonnegative integer")
    proto = Proto(obj["proto"])
    src_ip = obj["src_ip"]
    dst_ip = obj["dst_ip"]
    ip_to_int(src_ip)
    ip_to_int(dst_ip)
    ip_len = int(obj["ip_len"])
    if proto is Proto.ICMP:
        sport = int(obj.get("sport", 0))
        dport = int(obj.get("dport", 0))
    else:
        sport = int(obj["sport"])
        dport = int(obj["dport"])
    if not (0 <= sport <= 65535 and 0 <= dport <= 65535):
        raise ValueError("port out of range")
    flags = flags_from_letters(obj.get("tcp_flags", "")) if proto is Proto.TCP else TcpFlags.NONE
    icmp_type = None
    if proto is Proto.ICMP:
        icmp_type = int(obj.get("icmp_type", 0))
        if not 0 <= icmp_type <= 255:
            raise ValueError("icmp_type out of range")
    payload = bytes.fromhex(obj["payload_hex"]) if obj.get("payload_hex") else b""
    return PacketRecord(ts, src_ip, dst_ip, proto, sport, dport, flags, icmp_type, ip_len, payload)


def record_to_json(rec: PacketRecord) -> dict:
    obj: dict = {
        "ts_us": rec.ts,
        "src_ip": rec.src_ip,
        "dst_ip": rec.dst_ip,
        "proto": rec.proto.value,
        "sport": rec.src_port,
        "dport": rec.dst_port,
        "ip_len": rec.ip_len,
    }
    if rec.proto is Proto.TCP and rec.tcp_flags:
        obj["tcp_flags"] = flags_to_letters(rec.tcp_flags)
    if rec.proto is Proto.ICMP and rec.icmp_type is not None:
        obj["icmp_type"] = rec.icmp_type
    if rec.payload:
        obj["payload_hex"] = rec.payload.hex()
    return obj


def write_ndjson(records: Iterable[PacketRecord], path: str) -> int:
    """Write records in the ndjson capture format; returns the line count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), sort_keys=True))
            fh.write("\n")
            n += 1
    return n
