"""Deterministic simulator of a QUIC server under Initial floods.

Models connection-slot exhaustion and the stateless Retry defense as a
discrete-event loop at microsecond resolution. The server holds a fixed
pool of workers x connections_per_worker slots; a slot is reclaimed
lazily slot_hold_secs after creation. Without Retry, a request is
answered iff a slot is free at arrival, and an answered request elicits
exactly four response datagrams: one with coalesced Initial+Handshake,
one Handshake, and two short-header keep-alive PINGs 25 ms later. With
Retry, every Initial gets a stateless Retry datagram whose connection
IDs match the request (so the request counts as answered), and only
clients that echo the token consume a slot.

Anti-amplification: while an address is unverified the server never
sends more than 3x the bytes received from it. The flight is emitted
all-or-nothing per request against the triggering Initial's own budget
(never spending credit accrued from earlier unanswered Initials), which
is conservative with respect to the cumulative rule; with the default
sizes (3600 = 3 x 1200) the budget fits exactly.
"""

from __future__ import annotations

import hashlib
import logging
import random
import struct
from collections import deque
from dataclasses import dataclass
from typing import Iterator

from .wire import (
    PacketRecord,
    PacketType,
    Proto,
    QuicMessageCount,
    build_long_header_packet,
    build_short_header,
    int_to_ip,
    write_ndjson,
)

log = logging.getLogger(__name__)

KEEPALIVE_DELAY_US = 25_000
RETRY_DATAGRAM_BYTES = 128
AMPLIFICATION_FACTOR = 3
IP_UDP_OVERHEAD = 28


@dataclass(frozen=True)
class ServerConfig:
    workers: int = 4
    connections_per_worker: int = 1024
    slot_hold_secs: float = 60.0
    retry_enabled: bool = False
    initial_response_bytes: int = 3600
    min_client_initial_bytes: int = 1200
    server_ip: str = "203.0.113.10"

    def __post_init__(self):
        if self.workers <= 0 or self.connections_per_worker <= 0:
            raise ValueError("worker/connection counts must be positive")
        if self.slot_hold_secs <= 0:
            raise ValueError("slot_hold_secs must be positive")
        if self.initial_response_bytes <= 0 or self.min_client_initial_bytes <= 0:
            raise ValueError("byte sizes must be positive")

    @property
    def capacity(self) -> int:
        return self.workers * self.connections_per_worker


@dataclass(frozen=True)
class FloodConfig:
    rate_pps: float = 1000.0
    total_requests: int = 300_001
    legit_fraction: float = 0.0
    spoof_ip_pool: int = 65_536
    spoof_port_randomized: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rate_pps <= 0:
            raise ValueError("rate_pps must be positive")
        if self.total_requests < 1:
            raise ValueError("total_requests must be at least 1")
        if not 0.0 <= self.legit_fraction <= 1.0:
            raise ValueError("legit_fraction must be within [0, 1]")
        if self.spoof_ip_pool < 1:
            raise ValueError("spoof_ip_pool must be at least 1")


@dataclass(slots=True)
class ConnectionSlot:
    scid: bytes
    client_addr: tuple[int, int]
    created_ts: int
    expires_ts: int


@dataclass(slots=True)
class BenchResult:
    requests_sent: int
    response_datagrams: int
    answered_requests: int
    availability: float
    extra_rtt: bool
    backscatter_message_histogram: QuicMessageCount
    peak_occupied_slots: int

    def as_dict(self) -> dict:
        return {
            "requests_sent": self.requests_sent,
            "response_datagrams": self.response_datagrams,
            "answered_requests": self.answered_requests,
            "availability": self.availability,
            "extra_rtt": self.extra_rtt,
            "backscatter_message_histogram": self.backscatter_message_histogram.as_dict(),
            "peak_occupied_slots": self.peak_occupied_slots,
        }


@dataclass(slots=True)
class AmplificationAudit:
    """Per-emission accounting of bytes sent to unverified addresses."""

    events: int = 0
    violations: int = 0
    max_ratio: float = 0.0


def amplification_check(request_bytes: int, response_bytes_before_validation: int) -> bool:
    """True iff the pre-validation response stays within 3x the request."""
    if request_bytes <= 0:
        raise ValueError("request_bytes must be positive")
    return response_bytes_before_validation <= AMPLIFICATION_FACTOR * request_bytes


def _split_response(total: int) -> tuple[int, int, int]:
    """Sizes of the two handshake datagrams and each keep-alive PING."""
    ping = max(1, min(30, total // 4))
    remainder = total - 2 * ping
    first = remainder - remainder // 2
    return first, remainder - first, ping


def make_retry_token(key: bytes, ip: str, port: int, dcid: bytes) -> bytes:
    """Keyed 64-bit tag binding the Retry to the client address and DCID."""
    h = hashlib.blake2b(key=key[:64], digest_size=8)
    h.update(ip.encode())
    h.update(struct.pack(">H", port))
    h.update(dcid)
    return h.digest()


def validate_retry_token(key: bytes, ip: str, port: int, dcid: bytes, token: bytes) -> bool:
    return token == make_retry_token(key, ip, port, dcid)


class _TraceSink:
    """Collects response datagrams destined for in-telescope clients."""

    def __init__(self, telescope_fraction: float, seed: int):
        if not 0.0 <= telescope_fraction <= 1.0:
            raise ValueError("telescope_fraction must be within [0, 1]")
        self.telescope_fraction = telescope_fraction
        self._seed = seed & 0xFFFFFFFFFFFFFFFF
        self._threshold = int(telescope_fraction * 2**64)
        self._members: dict[int, bool] = {}
        self.rows: list[tuple[int, int, str, int, bytes, int]] = []
        self._seq = 0

    def in_telescope(self, ip_int: int) -> bool:
        member = self._members.get(ip_int)
        if member is None:
            digest = hashlib.blake2b(struct.pack(">IQ", ip_int, self._seed), digest_size=8).digest()
            member = struct.unpack(">Q", digest)[0] < self._threshold
            self._members[ip_int] = member
        return member

    def emit(self, ts: int, client_ip: str, client_port: int, payload: bytes, wire_len: int) -> None:
        self.rows.append((ts, self._seq, client_ip, client_port, payload, wire_len))
        self._seq += 1


def _flight_payloads(scid: bytes) -> tuple[bytes, bytes, bytes]:
    """Synthesized datagram payloads: Initial+Handshake coalesced, Handshake, PING."""
    initial_hs = build_long_header_packet(
        PacketType.INITIAL, b"", scid, payload=b"\x00" * 18
    ) + build_long_header_packet(PacketType.HANDSHAKE, b"", scid, payload=b"\x00" * 12)
    handshake = build_long_header_packet(PacketType.HANDSHAKE, b"", scid, payload=b"\x00" * 12)
    ping = build_short_header(b"\x01\x00\x00")
    return initial_hs, handshake, ping


def simulate(
    server: ServerConfig,
    flood: FloodConfig,
    audit: AmplificationAudit | None = None,
    trace: _TraceSink | None = None,
) -> BenchResult:
    """Run one flood against the simulated server.

    Deterministic for a given (server, flood) pair; attaching an audit
    or a trace sink never changes the BenchResult.
    """
    capacity = server.capacity
    hold_us = int(round(server.slot_hold_secs * 1e6))
    spacing = 1e6 / flood.rate_pps
    first_dg, second_dg, ping_dg = _split_response(server.initial_response_bytes)
    full_response = first_dg + second_dg + 2 * ping_dg
    flight_fits = amplification_check(server.min_client_initial_bytes, full_response)

    # Independent RNG streams: legit-client choices must not shift when
    # address generation is switched on by auditing/tracing.
    rng_legit = random.Random(flood.seed ^ 0x9E3779B97F4A7C15)
    rng_addr = random.Random(flood.seed ^ 0x5DEECE66D)
    need_addresses = audit is not None or trace is not None
    pool: list[int] = []
    if need_addresses:
        rng_pool = random.Random(flood.seed ^ 0x2545F4914F6CDD1D)
        pool = [rng_pool.randrange(0x01000000, 0xDF000000) for _ in range(flood.spoof_ip_pool)]

    run_key = hashlib.blake2b(struct.pack(">Q", flood.seed & 0xFFFFFFFFFFFFFFFF), digest_size=32).digest()
    scid_base = struct.unpack(">Q", run_key[:8])[0]
    legit_all = flood.legit_fraction >= 1.0
    legit_none = flood.legit_fraction <= 0.0

    slots: deque[ConnectionSlot] = deque()
    answered = 0
    completions = 0
    response_datagrams = 0
    peak = 0
    conn_index = 0

    received: dict[tuple[int, int], int] = {}
    sent: dict[tuple[int, int], int] = {}
    validated: set[tuple[int, int]] = set()

    def account(addr: tuple[int, int], size: int) -> None:
        if audit is None or addr in validated:
            return
        total = sent.get(addr, 0) + size
        sent[addr] = total
        got = received.get(addr, 0)
        audit.events += 1
        if total > AMPLIFICATION_FACTOR * got:
            audit.violations += 1
        if got:
            ratio = total / got
            if ratio > audit.max_ratio:
                audit.max_ratio = ratio

    def emit_flight(now: int, addr: tuple[int, int], scid: bytes) -> None:
        nonlocal response_datagrams
        response_datagrams += 4
        if audit is not None:
            account(addr, first_dg)
            account(addr, second_dg)
            account(addr, ping_dg)
            account(addr, ping_dg)
        if trace is not None and trace.in_telescope(addr[0]):
            client_ip = int_to_ip(addr[0])
            initial_hs, handshake, ping = _flight_payloads(scid)
            trace.emit(now, client_ip, addr[1], initial_hs, first_dg + IP_UDP_OVERHEAD)
            trace.emit(now, client_ip, addr[1], handshake, second_dg + IP_UDP_OVERHEAD)
            trace.emit(now + KEEPALIVE_DELAY_US, client_ip, addr[1], ping, ping_dg + IP_UDP_OVERHEAD)
            trace.emit(now + KEEPALIVE_DELAY_US, client_ip, addr[1], ping, ping_dg + IP_UDP_OVERHEAD)

    for i in range(flood.total_requests):
        now = int(i * spacing)
        while slots and slots[0].expires_ts <= now:
            slots.popleft()

        if need_addresses:
            addr = (
                pool[rng_addr.randrange(flood.spoof_ip_pool)],
                rng_addr.randrange(1024, 65536) if flood.spoof_port_randomized else 55_555,
            )
            if addr not in validated:
                received[addr] = received.get(addr, 0) + server.min_client_initial_bytes
        else:
            addr = (0, 0)

        if server.retry_enabled:
            # Stateless Retry: answers the request, allocates nothing.
            answered += 1
            response_datagrams += 1
            account(addr, RETRY_DATAGRAM_BYTES)
            if trace is not None and trace.in_telescope(addr[0]):
                client_ip = int_to_ip(addr[0])
                scid = struct.pack(">Q", (scid_base ^ 0x8000000000000000 ^ i) & 0xFFFFFFFFFFFFFFFF)
                token = make_retry_token(run_key, client_ip, addr[1], b"")
                payload = build_long_header_packet(PacketType.RETRY, b"", scid, token=token + b"\x00" * 16)
                trace.emit(now, client_ip, addr[1], payload, RETRY_DATAGRAM_BYTES + IP_UDP_OVERHEAD)
            legit = legit_all or (not legit_none and rng_legit.random() < flood.legit_fraction)
            if legit and len(slots) < capacity:
                # Token echo validates the address; the full flight follows
                # without amplification limits.
                if need_addresses:
                    validated.add(addr)
                scid = struct.pack(">Q", (scid_base ^ conn_index) & 0xFFFFFFFFFFFFFFFF)
                slots.append(ConnectionSlot(scid, addr, now, now + hold_us))
                if len(slots) > peak:
                    peak = len(slots)
                completions += 1
                conn_index += 1
                emit_flight(now, addr, scid)
        else:
            if len(slots) < capacity:
                # Connection state is created for the unverified client; the
                # flight is sent only when all four datagrams fit the budget.
                scid = struct.pack(">Q", (scid_base ^ conn_index) & 0xFFFFFFFFFFFFFFFF)
                slots.append(ConnectionSlot(scid, addr, now, now + hold_us))
                if len(slots) > peak:
                    peak = len(slots)
                conn_index += 1
                if flight_fits:
                    answered += 1
                    emit_flight(now, addr, scid)

    if server.retry_enabled:
        histogram = QuicMessageCount(
            initial=completions,
            handshake=2 * completions,
            retry=answered,
            other=2 * completions,
        )
    else:
        histogram = QuicMessageCount(initial=answered, handshake=2 * answered, other=2 * answered)

    return BenchResult(
        requests_sent=flood.total_requests,
        response_datagrams=response_datagrams,
        answered_requests=answered,
        availability=answered / flood.total_requests,
        extra_rtt=server.retry_enabled,
        backscatter_message_histogram=histogram,
        peak_occupied_slots=peak,
    )


def simulate_instrumented(server: ServerConfig, flood: FloodConfig) -> tuple[BenchResult, AmplificationAudit]:
    """Simulation plus per-emission anti-amplification accounting."""
    audit = AmplificationAudit()
    result = simulate(server, flood, audit=audit)
    return result, audit


def emit_backscatter_trace(
    server: ServerConfig,
    flood: FloodConfig,
    telescope_fraction: float,
    path: str,
) -> tuple[BenchResult, int]:
    """Run the flood and write in-telescope response datagrams as ndjson.

    Telescope membership is decided per spoofed client address with
    probability telescope_fraction (seed-stable), so either every
    datagram of an answered request lands in the trace or none does.
    Returns (result, lines written).
    """
    sink = _TraceSink(telescope_fraction, flood.seed)
    result = simulate(server, flood, trace=sink)
    sink.rows.sort(key=lambda row: (row[0], row[1]))
    written = write_ndjson(_trace_records(server, sink), path)
    return result, written


def _trace_records(server: ServerConfig, sink: _TraceSink) -> Iterator[PacketRecord]:
    for ts, _seq, client_ip, client_port, payload, wire_len in sink.rows:
        yield PacketRecord(
            ts=ts,
            src_ip=server.server_ip,
            dst_ip=client_ip,
            proto=Proto.UDP,
            src_port=443,
            dst_port=client_port,
            ip_len=wire_len,
            payload=payload,
        )


# --- synthetic ground-truth traces ------------------------------------------


@dataclass(frozen=True)
class PlantedTruth:
    """Ground truth for a synthetic backscatter capture."""

    flood_victims: tuple[str, ...]
    noise_sources: tuple[str, ...]
    base_ts: int


def plant_backscatter_trace(
    path: str,
    n_floods: int = 12,
    n_noise: int = 120,
    seed: int = 20210401,
    base_ts: int = 1_617_235_200_000_000,
) -> PlantedTruth:
    """Write an ndjson capture with known floods and sub-threshold noise.

    Each planted flood exceeds every default detection threshold by at
    least 2x: 120 packets (>50), ~299 s duration (>120 s), and one
    wall-aligned minute holding 90 packets (1.5 max pps > 1.0). Noise
    sources rotate through three sub-threshold shapes, each failing at
    least one default threshold.
    """
    rng = random.Random(seed)
    records: list[PacketRecord] = []
    victims = []
    noise_sources = []

    for i in range(n_floods):
        victim = int_to_ip(0x14000000 + i + 1)  # 20.0.0.0/8 block
        victims.append(victim)
        scids = [struct.pack(">Q", (seed + i * 1000 + k) & 0xFFFFFFFFFFFFFFFF) for k in range(6)]
        clients = [int_to_ip(0xAC100000 + i * 64 + k) for k in range(40)]  # 172.16/12 block
        start = ((base_ts + i * 17_000_000) // 60_000_000 + 1) * 60_000_000
        times = [start + int(k * 650_000) for k in range(90)]  # one aligned minute, 1.5 pps
        tail_start = times[-1] + 8_000_000
        times += [tail_start + k * 8_000_000 for k in range(30)]  # stretches duration past 240 s
        for k, ts in enumerate(times):
            scid = scids[k % len(scids)]
            client = clients[k % len(clients)]
            dport = 1024 + (k * 37 + i * 101) % 60000
            kind = k % 4
            if kind == 0:
                payload = _flight_payloads(scid)[0]
            elif kind == 1:
                payload = _flight_payloads(scid)[1]
            else:
                payload = build_short_header(b"\x01\x00\x00")
            records.append(
                PacketRecord(ts, victim, client, Proto.UDP, 443, dport, ip_len=IP_UDP_OVERHEAD + len(payload), payload=payload)
            )

    for j in range(n_noise):
        source = int_to_ip(0x15000000 + j + 1)  # 21.0.0.0/8 block
        noise_sources.append(source)
        client = int_to_ip(0xAC200000 + j)
        start = base_ts + rng.randrange(0, 1800) * 1_000_000
        shape = j % 3
        if shape == 0:
            times = [start + k * 4_000_000 for k in range(8)]  # 8 packets / 28 s
        elif shape == 1:
            aligned = (start // 60_000_000 + 1) * 60_000_000
            times = [aligned + k * 1_500_000 for k in range(30)]  # 30 packets / 43.5 s, 0.5 pps
        else:
            times = [start + k * 6_300_000 for k in range(20)]  # 20 packets / ~120 s
        scid = struct.pack(">Q", (seed ^ (j + 77)) & 0xFFFFFFFFFFFFFFFF)
        for k, ts in enumerate(times):
            payload = _flight_payloads(scid)[1] if k % 2 else build_short_header(b"\x01\x00\x00")
            dport = 2048 + (k * 53 + j) % 50000
            records.append(
                PacketRecord(ts, source, client, Proto.UDP, 443, dport, ip_len=IP_UDP_OVERHEAD + len(payload), payload=payload)
            )

    records.sort(key=lambda r: r.ts)
    write_ndjson(records, path)
    return PlantedTruth(tuple(victims), tuple(noise_sources), base_ts)
