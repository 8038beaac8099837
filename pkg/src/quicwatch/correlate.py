"""Multi-vector correlation of QUIC attacks with TCP/ICMP attacks.

Attack intervals are floored to whole seconds and treated as closed;
two attacks are concurrent when they share at least one mutual second.
A QUIC attack with no mutual second but a legacy attack on the same
victim somewhere in the capture is sequential; otherwise isolated.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .detect import AttackEvent, ProtocolClass
from .wire import ip_to_int


class MultiVector(Enum):
    CONCURRENT = "concurrent"
    SEQUENTIAL = "sequential"
    ISOLATED = "isolated"


@dataclass(frozen=True)
class MultiVectorLabel:
    value: MultiVector
    overlap_share: float | None = None  # concurrent only
    nearest_gap: float | None = None  # sequential only, seconds


@dataclass(slots=True)
class VictimTimeline:
    victim_ip: str
    quic_attacks: list[AttackEvent]
    legacy_attacks: list[AttackEvent]


def _interval(attack: AttackEvent) -> tuple[int, int]:
    """Closed [start, end] interval in whole seconds."""
    return (attack.first_ts // 1_000_000, attack.last_ts // 1_000_000)


def build_timelines(attacks: Iterable[AttackEvent]) -> list[VictimTimeline]:
    """Group attacks per victim, QUIC vs legacy, ts-sorted."""
    grouped: dict[str, VictimTimeline] = {}
    for attack in attacks:
        timeline = grouped.get(attack.victim_ip)
        if timeline is None:
            timeline = VictimTimeline(attack.victim_ip, [], [])
            grouped[attack.victim_ip] = timeline
        if attack.protocol_class is ProtocolClass.QUIC:
            timeline.quic_attacks.append(attack)
        else:
            timeline.legacy_attacks.append(attack)
    for timeline in grouped.values():
        timeline.quic_attacks.sort(key=lambda a: (a.first_ts, a.last_ts))
        timeline.legacy_attacks.sort(key=lambda a: (a.first_ts, a.last_ts))
    return sorted(grouped.values(), key=lambda t: ip_to_int(t.victim_ip))


def _covered_seconds(quic: AttackEvent, legacy: Iterable[AttackEvent]) -> int:
    """Seconds of the QUIC interval covered by the union of legacy intervals."""
    qs, qe = _interval(quic)
    clipped = []
    for attack in legacy:
        ls, le = _interval(attack)
        lo, hi = max(ls, qs), min(le, qe)
        if lo <= hi:
            clipped.append((lo, hi))
    clipped.sort()
    covered = 0
    cur_lo, cur_hi = None, None
    for lo, hi in clipped:
        if cur_hi is None or lo > cur_hi + 1:
            if cur_hi is not None:
                covered += cur_hi - cur_lo + 1
            cur_lo, cur_hi = lo, hi
        elif hi > cur_hi:
            cur_hi = hi
    if cur_hi is not None:
        covered += cur_hi - cur_lo + 1
    return covered


def overlap_share(quic: AttackEvent, legacy: list[AttackEvent]) -> float:
    """Fraction of the QUIC attack's seconds covered by legacy attacks.

    Overlapping legacy intervals are unioned, never double counted.
    Raises ValueError when there is no mutual second (the attack is not
    concurrent, the share is undefined).
    """
    qs, qe = _interval(quic)
    covered = _covered_seconds(quic, legacy)
    if covered == 0:
        raise ValueError("overlap_share requires a concurrent attack")
    return covered / (qe - qs + 1)


def _nearest_gap(quic: AttackEvent, legacy: list[AttackEvent]) -> float:
    qs, qe = _interval(quic)
    best = None
    for attack in legacy:
        ls, le = _interval(attack)
        if le < qs:
            gap = qs - le
        elif ls > qe:
            gap = ls - qe
        else:
            gap = 0
        if best is None or gap < best:
            best = gap
    return float(best) if best is not None else 0.0


def label_attacks(timelines: Iterable[VictimTimeline]) -> list[tuple[AttackEvent, MultiVectorLabel]]:
    """Label every QUIC attack concurrent, sequential, or isolated."""
    labeled = []
    for timeline in timelines:
        for quic in timeline.quic_attacks:
            if not timeline.legacy_attacks:
                labeled.append((quic, MultiVectorLabel(MultiVector.ISOLATED)))
                continue
            covered = _covered_seconds(quic, timeline.legacy_attacks)
            if covered > 0:
                qs, qe = _interval(quic)
                share = covered / (qe - qs + 1)
                labeled.append((quic, MultiVectorLabel(MultiVector.CONCURRENT, overlap_share=share)))
            else:
                gap = _nearest_gap(quic, timeline.legacy_attacks)
                labeled.append((quic, MultiVectorLabel(MultiVector.SEQUENTIAL, nearest_gap=gap)))
    return labeled


def sequential_gaps(timelines: Iterable[VictimTimeline]) -> list[float]:
    """Distance in seconds from each sequential QUIC attack to the nearest legacy attack."""
    return sorted(
        label.nearest_gap
        for _, label in label_attacks(timelines)
        if label.value is MultiVector.SEQUENTIAL
    )
