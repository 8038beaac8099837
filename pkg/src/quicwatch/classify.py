"""Packet classification, research-scanner filtering, offline enrichment.

Direction labels follow the UDP/443 split: destination 443 is a request
(scan), source 443 is a response (backscatter), both is ambiguous and
excluded from either analysis. TCP/ICMP backscatter kinds support the
legacy flood comparison. Enrichment reads offline CSV snapshots instead
of live GreyNoise/PeeringDB/scan services.
"""

from __future__ import annotations

import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .wire import QUIC_PORT, PacketRecord, Proto, TcpFlags, ip_to_int

log = logging.getLogger(__name__)


class SnapshotError(Exception):
    """Snapshot file unreadable or schema-invalid (fatal config error)."""


class Direction(Enum):
    REQUEST = "request"
    RESPONSE = "response"
    AMBIGUOUS = "ambiguous"
    NON_QUIC = "non_quic"


class LegacyBackscatterKind(Enum):
    TCP_SYNACK = "tcp_synack"
    TCP_RST = "tcp_rst"
    ICMP_UNREACHABLE = "icmp_unreachable"
    ICMP_TTL_EXCEEDED = "icmp_ttl_exceeded"
    NONE = "none"


class NetworkType(Enum):
    CONTENT = "Content"
    EYEBALL = "Eyeball/AccessTransit"
    NSP = "NSP"
    ENTERPRISE = "Enterprise"
    EDUCATIONAL = "Educational/Research"
    OTHER = "Other"
    UNKNOWN = "Unknown"


class ScannerRule(Enum):
    ASN_LIST = "asn_list"
    COVERAGE_HEURISTIC = "coverage_heuristic"
    NONE = "none"


@dataclass(frozen=True)
class Enrichment:
    asn: int | None = None
    network_type: NetworkType = NetworkType.UNKNOWN
    known_quic_server: bool = False
    threat_tags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ScannerVerdict:
    is_research_scanner: bool
    rule: ScannerRule


def classify_direction(p: PacketRecord) -> Direction:
    if p.proto is not Proto.UDP:
        return Direction.NON_QUIC
    src443 = p.src_port == QUIC_PORT
    dst443 = p.dst_port == QUIC_PORT
    if src443 and dst443:
        return Direction.AMBIGUOUS
    if dst443:
        return Direction.REQUEST
    if src443:
        return Direction.RESPONSE
    return Direction.NON_QUIC


def classify_legacy(p: PacketRecord) -> LegacyBackscatterKind:
    if p.proto is Proto.TCP:
        if p.tcp_flags & TcpFlags.RST:
            return LegacyBackscatterKind.TCP_RST
        if p.tcp_flags & TcpFlags.SYN and p.tcp_flags & TcpFlags.ACK:
            return LegacyBackscatterKind.TCP_SYNACK
    elif p.proto is Proto.ICMP:
        if p.icmp_type == 3:
            return LegacyBackscatterKind.ICMP_UNREACHABLE
        if p.icmp_type == 11:
            return LegacyBackscatterKind.ICMP_TTL_EXCEEDED
    return LegacyBackscatterKind.NONE


# --- snapshots ---------------------------------------------------------------


_NETWORK_TYPE_BY_VALUE = {t.value: t for t in NetworkType}


class SnapshotSet:
    """Offline enrichment data: prefixes.csv, asn_types.csv, hitlist.csv, threat.csv.

    Missing files are treated as empty snapshots; present-but-broken
    files raise SnapshotError at load time.
    """

    def __init__(self):
        self._prefixes: dict[int, dict[int, int]] = {}  # plen -> prefix int -> asn
        self._plens: list[int] = []
        self.asn_types: dict[int, NetworkType] = {}
        self.hitlist: set[str] = set()
        self.threat: dict[str, frozenset[str]] = {}

    @property
    def has_prefixes(self) -> bool:
        return bool(self._plens)

    def add_prefix(self, prefix: str, asn: int) -> None:
        net, _, plen_s = prefix.partition("/")
        plen = int(plen_s) if plen_s else 32
        if not 0 <= plen <= 32:
            raise ValueError(f"bad prefix length in {prefix!r}")
        mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF if plen else 0
        self._prefixes.setdefault(plen, {})[ip_to_int(net) & mask] = asn
        self._plens = sorted(self._prefixes, reverse=True)

    def lookup_asn(self, ip: str) -> int | None:
        value = ip_to_int(ip)
        for plen in self._plens:
            mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF if plen else 0
            asn = self._prefixes[plen].get(value & mask)
            if asn is not None:
                return asn
        return None

    @classmethod
    def load(cls, snapshot_dir: str) -> "SnapshotSet":
        snap = cls()
        snap._load_csv(snapshot_dir, "prefixes.csv", ("prefix", "asn"), snap._add_prefix_row)
        snap._load_csv(snapshot_dir, "asn_types.csv", ("asn", "network_type"), snap._add_type_row)
        snap._load_csv(snapshot_dir, "hitlist.csv", ("ip",), snap._add_hitlist_row)
        snap._load_csv(snapshot_dir, "threat.csv", ("ip", "tag"), snap._add_threat_row)
        return snap

    def _load_csv(self, snapshot_dir, name, columns, add_row) -> None:
        path = os.path.join(snapshot_dir, name)
        if not os.path.exists(path):
            return
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                header = reader.fieldnames or []
                missing = [c for c in columns if c not in header]
                if missing:
                    raise SnapshotError(f"{path}: missing column(s) {missing}")
                for row in reader:
                    add_row(row)
        except SnapshotError:
            raise
        except (OSError, ValueError, csv.Error) as exc:
            raise SnapshotError(f"{path}: {exc}") from exc

    def _add_prefix_row(self, row):
        self.add_prefix(row["prefix"].strip(), int(row["asn"]))

    def _add_type_row(self, row):
        label = row["network_type"].strip()
        self.asn_types[int(row["asn"])] = _NETWORK_TYPE_BY_VALUE.get(label, NetworkType.OTHER)

    def _add_hitlist_row(self, row):
        ip = row["ip"].strip()
        ip_to_int(ip)
        self.hitlist.add(ip)

    def _add_threat_row(self, row):
        ip = row["ip"].strip()
        ip_to_int(ip)
        tags = self.threat.get(ip, frozenset())
        self.threat[ip] = tags | {row["tag"].strip()}


def enrich(ip: str, snapshots: SnapshotSet) -> Enrichment:
    """Longest-prefix ASN, ASN network type, hitlist and threat membership."""
    asn = snapshots.lookup_asn(ip)
    network_type = snapshots.asn_types.get(asn, NetworkType.UNKNOWN) if asn is not None else NetworkType.UNKNOWN
    return Enrichment(
        asn=asn,
        network_type=network_type,
        known_quic_server=ip in snapshots.hitlist,
        threat_tags=snapshots.threat.get(ip, frozenset()),
    )


# --- research-scanner filter ---------------------------------------------------


@dataclass(frozen=True)
class ScannerConfig:
    asn_list: frozenset[int] = frozenset()
    prefix_list: tuple[str, ...] = ()
    coverage_fraction: float = 0.5
    max_pkts_per_dst: int = 2
    telescope_size: int = 2**23  # /9 telescope

    @classmethod
    def from_entries(cls, entries: Iterable[str], **kwargs) -> "ScannerConfig":
        """Entries are plain ASNs ("3320") or CIDR prefixes ("10.0.0.0/8")."""
        asns, prefixes = set(), []
        for entry in entries:
            entry = entry.strip()
            if not entry:
                continue
            if "/" in entry or "." in entry:
                prefixes.append(entry)
            else:
                asns.add(int(entry))
        return cls(asn_list=frozenset(asns), prefix_list=tuple(prefixes), **kwargs)


def build_source_profiles(packets: Iterable[PacketRecord]) -> dict[str, dict[str, int]]:
    """Per-source destination packet counts, aggregated over the capture."""
    profiles: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for p in packets:
        profiles[p.src_ip][p.dst_ip] += 1
    return {src: dict(dsts) for src, dsts in profiles.items()}


def _prefix_match(ip: str, prefixes: tuple[str, ...]) -> bool:
    value = ip_to_int(ip)
    for prefix in prefixes:
        net, _, plen_s = prefix.partition("/")
        plen = int(plen_s) if plen_s else 32
        mask = (0xFFFFFFFF << (32 - plen)) & 0xFFFFFFFF if plen else 0
        if value & mask == ip_to_int(net) & mask:
            return True
    return False


def scanner_verdict(
    src_ip: str,
    profile: Mapping[str, int],
    cfg: ScannerConfig,
    snapshots: SnapshotSet | None = None,
) -> ScannerVerdict:
    asn_rule_usable = snapshots is not None and snapshots.has_prefixes
    if cfg.asn_list and asn_rule_usable:
        asn = snapshots.lookup_asn(src_ip)
        if asn is not None and asn in cfg.asn_list:
            return ScannerVerdict(True, ScannerRule.ASN_LIST)
    if cfg.prefix_list and _prefix_match(src_ip, cfg.prefix_list):
        return ScannerVerdict(True, ScannerRule.ASN_LIST)
    covered = sum(1 for n in profile.values() if n <= cfg.max_pkts_per_dst)
    if covered > cfg.coverage_fraction * cfg.telescope_size:
        return ScannerVerdict(True, ScannerRule.COVERAGE_HEURISTIC)
    return ScannerVerdict(False, ScannerRule.NONE)


def filter_scanners(
    sessions: list,
    cfg: ScannerConfig,
    profiles: Mapping[str, Mapping[str, int]],
    snapshots: SnapshotSet | None = None,
):
    """Split request sessions into (kept, removed-with-verdict).

    Idempotent: sources kept once are kept again, since verdicts depend
    only on the per-source capture aggregate.
    """
    if cfg.asn_list and (snapshots is None or not snapshots.has_prefixes):
        log.warning("ASN snapshot missing: scanner ASN-list rule disabled, coverage heuristic still active")
    verdicts: dict[str, ScannerVerdict] = {}
    kept, removed = [], []
    for session in sessions:
        verdict = verdicts.get(session.src_ip)
        if verdict is None:
            verdict = scanner_verdict(session.src_ip, profiles.get(session.src_ip, {}), cfg, snapshots)
            verdicts[session.src_ip] = verdict
        if verdict.is_research_scanner:
            removed.append((session, verdict))
        else:
            kept.append(session)
    return kept, removed
