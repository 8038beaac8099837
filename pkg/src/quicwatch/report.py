"""Report assembly: CSV artifacts, CDF tables, medians, report.json.

All writers produce byte-stable output for fixed input: rows are
canonically ordered, floats are fixed to six decimals, and JSON keys
are sorted.
"""

from __future__ import annotations

import json
from typing import Iterable, Sequence

from .correlate import MultiVector, MultiVectorLabel
from .detect import AttackEvent, ProtocolClass, extrapolate_rate
from .sessionize import Session
from .wire import QuicMessageCount, ip_to_int


def fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    if value is None:
        return ""
    return str(value)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def median_lower(values: Sequence[float]) -> float:
    """Median with the lower-middle element on even cardinality."""
    if not values:
        raise ValueError("median of empty sequence")
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


def report_medians(attacks: Iterable[AttackEvent]) -> dict[str, dict[str, float]]:
    """Per-protocol-class median duration and max pps; absent when empty."""
    by_class: dict[str, list[AttackEvent]] = {}
    for attack in attacks:
        by_class.setdefault(attack.protocol_class.value, []).append(attack)
    return {
        name: {
            "duration_secs": median_lower([a.duration for a in group]),
            "max_pps": median_lower([a.max_pps for a in group]),
        }
        for name, group in sorted(by_class.items())
    }


def cdf_points(values: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF: one row per distinct value, cumulative fraction."""
    if not values:
        return []
    ordered = sorted(values)
    n = len(ordered)
    points = []
    for i, v in enumerate(ordered, start=1):
        if i == n or ordered[i] != v:
            points.append((v, i / n))
    return points


def _versions_field(versions: dict[int, int]) -> str:
    return ";".join(f"0x{v:08x}:{c}" for v, c in sorted(versions.items()))


SESSION_HEADER = (
    "label",
    "src_ip",
    "first_ts_us",
    "last_ts_us",
    "packet_count",
    "duration_secs",
    "max_pps",
    "distinct_dst_ips",
    "distinct_dst_ports",
    "distinct_scids",
    "quic_versions",
    "msg_initial",
    "msg_handshake",
    "msg_retry",
    "msg_version_negotiation",
    "msg_other",
)


def session_rows(sessions: Iterable[Session]) -> list[tuple]:
    rows = []
    for s in sorted(sessions, key=lambda s: (s.label, ip_to_int(s.src_ip), s.first_ts)):
        m = s.message_counts
        rows.append(
            (
                s.label,
                s.src_ip,
                s.first_ts,
                s.last_ts,
                s.packet_count,
                s.duration,
                s.max_pps,
                s.distinct_dst_ips,
                s.distinct_dst_ports,
                s.distinct_scids,
                _versions_field(s.quic_versions),
                m.initial,
                m.handshake,
                m.retry,
                m.version_negotiation,
                m.other,
            )
        )
    return rows


ATTACK_HEADER = (
    "protocol_class",
    "victim_ip",
    "first_ts_us",
    "last_ts_us",
    "packet_count",
    "duration_secs",
    "max_pps",
    "extrapolated_pps",
    "distinct_client_ips",
    "distinct_client_ports",
    "distinct_scids",
    "quic_version_majority",
    "asn",
    "network_type",
    "known_quic_server",
    "threat_tags",
)


def attack_id(attack: AttackEvent) -> str:
    return f"{attack.victim_ip}:{attack.first_ts}"


def attack_sort_key(attack: AttackEvent):
    return (attack.protocol_class.value, ip_to_int(attack.victim_ip), attack.first_ts)


def attack_rows(attacks: Iterable[AttackEvent], telescope_fraction: float) -> list[tuple]:
    rows = []
    for a in sorted(attacks, key=attack_sort_key):
        e = a.enrichment
        rows.append(
            (
                a.protocol_class.value,
                a.victim_ip,
                a.first_ts,
                a.last_ts,
                a.packet_count,
                a.duration,
                a.max_pps,
                extrapolate_rate(a.max_pps, telescope_fraction),
                a.distinct_client_ips,
                a.distinct_client_ports,
                a.distinct_scids,
                f"0x{a.quic_version_majority:08x}" if a.quic_version_majority is not None else "",
                e.asn,
                e.network_type.value,
                int(e.known_quic_server),
                ";".join(sorted(e.threat_tags)),
            )
        )
    return rows


LABEL_HEADER = ("attack_id", "victim_ip", "label", "overlap_share", "nearest_gap_secs")


def label_rows(labeled: Iterable[tuple[AttackEvent, MultiVectorLabel]]) -> list[tuple]:
    rows = []
    for attack, label in sorted(labeled, key=lambda pair: attack_sort_key(pair[0])):
        rows.append(
            (
                attack_id(attack),
                attack.victim_ip,
                label.value.value,
                label.overlap_share,
                label.nearest_gap,
            )
        )
    return rows


def class_cdf_rows(attacks: Iterable[AttackEvent], value_of) -> list[tuple]:
    by_class: dict[str, list[float]] = {}
    for attack in attacks:
        by_class.setdefault(attack.protocol_class.value, []).append(value_of(attack))
    rows = []
    for name in sorted(by_class):
        rows.extend((name, v, f) for v, f in cdf_points(by_class[name]))
    return rows


def label_distribution(labeled: Sequence[tuple[AttackEvent, MultiVectorLabel]]) -> dict[str, float]:
    total = len(labeled)
    shares = {kind.value: 0.0 for kind in MultiVector}
    if total:
        for _, label in labeled:
            shares[label.value.value] += 1
        for key in shares:
            shares[key] = 100.0 * shares[key] / total
    return shares


def message_composition(attacks: Iterable[AttackEvent]) -> dict[str, float]:
    total = QuicMessageCount()
    for attack in attacks:
        total = total + attack.message_counts
    n = total.total()
    return {
        name: (100.0 * count / n if n else 0.0)
        for name, count in sorted(total.as_dict().items())
    }


def top_victims(recurrence: dict[str, int], n: int = 10) -> list[dict]:
    ranked = sorted(recurrence.items(), key=lambda kv: (-kv[1], ip_to_int(kv[0])))
    return [{"victim_ip": ip, "attacks": count} for ip, count in ranked[:n]]


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
