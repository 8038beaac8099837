"""DoS flood detection over backscatter sessions.

A backscatter session is an attack when it has more than 25 packets, a
duration longer than 60 seconds, and a maximum packet rate higher than
0.5 pps over one-minute slots (all inequalities strict). The weight w
scales all three thresholds for sensitivity sweeps. The victim is the
session's source: backscatter originates at the flooded server.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

from .classify import Enrichment
from .sessionize import Session
from .wire import QuicMessageCount

DEFAULT_TELESCOPE_FRACTION = 1.0 / 512  # /9 of IPv4


class ProtocolClass(Enum):
    QUIC = "QUIC"
    TCP = "TCP"
    ICMP = "ICMP"


_CLASS_BY_LABEL = {"response": ProtocolClass.QUIC, "tcp": ProtocolClass.TCP, "icmp": ProtocolClass.ICMP}


@dataclass(frozen=True)
class Thresholds:
    min_packets: float = 25.0
    min_duration: float = 60.0
    min_max_pps: float = 0.5
    weight: float = 1.0

    def __post_init__(self):
        for name in ("min_packets", "min_duration", "min_max_pps", "weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def with_weight(self, w: float) -> "Thresholds":
        return Thresholds(self.min_packets, self.min_duration, self.min_max_pps, w)

    def matches(self, session: Session) -> bool:
        w = self.weight
        return (
            session.packet_count > self.min_packets * w
            and session.duration > self.min_duration * w
            and session.max_pps > self.min_max_pps * w
        )


@dataclass(slots=True)
class AttackEvent:
    victim_ip: str
    protocol_class: ProtocolClass
    first_ts: int
    last_ts: int
    packet_count: int
    max_pps: float
    distinct_client_ips: int
    distinct_client_ports: int
    distinct_scids: int
    quic_version_majority: int | None
    enrichment: Enrichment
    message_counts: QuicMessageCount = field(default_factory=QuicMessageCount)

    @property
    def duration(self) -> float:
        return (self.last_ts - self.first_ts) / 1e6


def _version_majority(versions: dict[int, int]) -> int | None:
    if not versions:
        return None
    # deterministic: highest count, then lowest version value
    return min(versions, key=lambda v: (-versions[v], v))


def detect_attacks(
    sessions: Iterable[Session],
    thresholds: Thresholds = Thresholds(),
    enricher: Callable[[str], Enrichment] | None = None,
) -> list[AttackEvent]:
    """Backscatter sessions passing all three thresholds, as AttackEvents.

    Request-direction sessions are not backscatter and are skipped.
    """
    attacks = []
    for session in sessions:
        protocol_class = _CLASS_BY_LABEL.get(session.label)
        if protocol_class is None or not thresholds.matches(session):
            continue
        attacks.append(
            AttackEvent(
                victim_ip=session.src_ip,
                protocol_class=protocol_class,
                first_ts=session.first_ts,
                last_ts=session.last_ts,
                packet_count=session.packet_count,
                max_pps=session.max_pps,
                distinct_client_ips=session.distinct_dst_ips,
                distinct_client_ports=session.distinct_dst_ports,
                distinct_scids=session.distinct_scids,
                quic_version_majority=_version_majority(session.quic_versions),
                enrichment=enricher(session.src_ip) if enricher else Enrichment(),
                message_counts=session.message_counts,
            )
        )
    return attacks


def threshold_sweep(
    sessions: Sequence[Session],
    weights: Sequence[float],
    thresholds: Thresholds = Thresholds(),
    enricher: Callable[[str], Enrichment] | None = None,
) -> list[tuple[float, int, float]]:
    """(weight, attack count, content-provider share) per weight."""
    from .classify import NetworkType

    if not weights:
        raise ValueError("weights must be nonempty")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    rows = []
    for w in sorted(weights):
        attacks = detect_attacks(sessions, thresholds.with_weight(w), enricher)
        content = sum(1 for a in attacks if a.enrichment.network_type is NetworkType.CONTENT)
        share = content / len(attacks) if attacks else 0.0
        rows.append((float(w), len(attacks), share))
    return rows


def extrapolate_rate(max_pps: float, telescope_fraction: float = DEFAULT_TELESCOPE_FRACTION) -> float:
    """Telescope-observed rate scaled to the full IPv4 Internet."""
    if not 0 < telescope_fraction <= 1:
        raise ValueError("telescope_fraction must be in (0, 1]")
    return max_pps / telescope_fraction


def victim_recurrence(attacks: Iterable[AttackEvent]) -> dict[str, int]:
    """Attack count per victim IP."""
    counts: Counter[str] = Counter()
    for attack in attacks:
        counts[attack.victim_ip] += 1
    return dict(counts)
