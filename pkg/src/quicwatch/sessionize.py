"""Inactivity-timeout sessionization with per-session traffic statistics.

Packets from one source belong to a session while the gap between
consecutive packets stays within the timeout; a gap strictly greater
than the timeout starts a new session. Packet rates use wall-clock
aligned one-minute slots, so a single-packet session has max_pps 1/60.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .wire import (
    PacketRecord,
    ParseFailure,
    QuicMessageCount,
    count_messages,
    ip_to_int,
    parse_long_header,
)

DEFAULT_TIMEOUT_SECS = 300.0
SLOT_US = 60_000_000


@dataclass(slots=True)
class Session:
    """Timeout-bounded packet group from one source."""

    src_ip: str
    label: str  # request | response | tcp | icmp
    first_ts: int
    last_ts: int
    packet_count: int
    max_pps: float
    distinct_dst_ips: int
    distinct_dst_ports: int
    distinct_scids: int
    quic_versions: dict[int, int]
    message_counts: QuicMessageCount

    @property
    def duration(self) -> float:
        """Seconds between first and last packet (0 for single packets)."""
        return (self.last_ts - self.first_ts) / 1e6


class _Builder:
    __slots__ = ("first_ts", "last_ts", "count", "slots", "dsts", "dports", "scids", "versions", "messages")

    def __init__(self, ts: int):
        self.first_ts = ts
        self.last_ts = ts
        self.count = 0
        self.slots: Counter[int] = Counter()
        self.dsts: set[str] = set()
        self.dports: set[int] = set()
        self.scids: set[bytes] = set()
        self.versions: Counter[int] = Counter()
        self.messages = QuicMessageCount()

    def add(self, p: PacketRecord, quic: bool) -> None:
        self.last_ts = p.ts
        self.count += 1
        self.slots[p.ts // SLOT_US] += 1
        self.dsts.add(p.dst_ip)
        self.dports.add(p.dst_port)
        if quic and p.payload:
            header = parse_long_header(p.payload)
            if not isinstance(header, ParseFailure):
                if header.version:
                    self.versions[header.version] += 1
                    self.scids.add(bytes(header.scid))
            self.messages = self.messages + count_messages(p.payload)

    def finish(self, src_ip: str, label: str) -> Session:
        return Session(
            src_ip=src_ip,
            label=label,
            first_ts=self.first_ts,
            last_ts=self.last_ts,
            packet_count=self.count,
            max_pps=max(self.slots.values()) / 60.0,
            distinct_dst_ips=len(self.dsts),
            distinct_dst_ports=len(self.dports),
            distinct_scids=len(self.scids),
            quic_versions=dict(self.versions),
            message_counts=self.messages,
        )


def _session_key(s: Session) -> tuple[int, int]:
    return (ip_to_int(s.src_ip), s.first_ts)


def _sessionize_chunk(packets: Sequence[PacketRecord], timeout_us: int, label: str, quic: bool) -> list[Session]:
    sessions: list[Session] = []
    builders: dict[str, _Builder] = {}
    for p in packets:
        builder = builders.get(p.src_ip)
        if builder is not None and p.ts - builder.last_ts > timeout_us:
            sessions.append(builder.finish(p.src_ip, label))
            builder = None
        if builder is None:
            builder = _Builder(p.ts)
            builders[p.src_ip] = builder
        builder.add(p, quic)
    for src_ip, builder in builders.items():
        sessions.append(builder.finish(src_ip, label))
    return sessions


def sessionize(
    packets: Iterable[PacketRecord],
    timeout_secs: float = DEFAULT_TIMEOUT_SECS,
    label: str = "response",
    jobs: int = 1,
) -> list[Session]:
    """Group a ts-ordered packet stream into per-source sessions.

    A gap strictly greater than timeout_secs splits; equality keeps the
    session open. QUIC header statistics (versions, SCIDs, message
    tallies) are collected for request/response labels only. Sources may
    be processed in parallel partitions (jobs > 1); the result is
    identical and canonically ordered by (src_ip, first_ts) either way.
    """
    if timeout_secs <= 0 or math.isnan(timeout_secs):
        raise ValueError("timeout must be positive")
    timeout_us = math.inf if math.isinf(timeout_secs) else int(round(timeout_secs * 1e6))
    quic = label in ("request", "response")

    if jobs <= 1:
        sessions = _sessionize_chunk(list(packets), timeout_us, label, quic)
    else:
        partitions: list[list[PacketRecord]] = [[] for _ in range(jobs)]
        for p in packets:
            partitions[ip_to_int(p.src_ip) % jobs].append(p)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(lambda part: _sessionize_chunk(part, timeout_us, label, quic), partitions)
        sessions = [s for chunk in results for s in chunk]
    sessions.sort(key=_session_key)
    return sessions


def timeout_sweep(
    packets: Iterable[PacketRecord],
    timeouts: Sequence[float],
) -> list[tuple[float, int]]:
    """Session counts per timeout, plus the timeout=inf lower bound.

    Computed from per-source inter-packet gaps: a timeout t yields
    sum(1 + gaps strictly above t) sessions per source, which matches
    sessionize() exactly but costs one pass over the packets.
    """
    if not timeouts:
        raise ValueError("timeouts must be nonempty")
    if any(t <= 0 for t in timeouts):
        raise ValueError("timeouts must be positive")

    last_ts: dict[str, int] = {}
    gaps_us: list[int] = []
    n_sources = 0
    for p in packets:
        prev = last_ts.get(p.src_ip)
        if prev is None:
            n_sources += 1
        else:
            gaps_us.append(p.ts - prev)
        last_ts[p.src_ip] = p.ts

    gaps_us.sort()
    results = []
    for t in sorted(timeouts):
        timeout_us = int(round(t * 1e6))
        # sessions = sources + gaps strictly greater than the timeout
        extra = len(gaps_us) - bisect_right(gaps_us, timeout_us)
        results.append((float(t), n_sources + extra))
    results.append((math.inf, n_sources))
    return results
