"""QUIC flood detection from network-telescope backscatter.

Pipeline: wire (ingest + dissect) -> classify -> sessionize -> detect ->
correlate -> report, plus floodlab, a deterministic simulator of QUIC
handshake state exhaustion and the Retry defense.
"""

__version__ = "0.1.0"

from .classify import Direction, Enrichment, LegacyBackscatterKind, SnapshotSet
from .detect import AttackEvent, Thresholds, detect_attacks, extrapolate_rate
from .floodlab import BenchResult, FloodConfig, ServerConfig, simulate
from .sessionize import Session, timeout_sweep
from .wire import CaptureReader, PacketRecord, QuicHeader, parse_long_header

__all__ = [
    "AttackEvent",
    "BenchResult",
    "CaptureReader",
    "Direction",
    "Enrichment",
    "FloodConfig",
    "LegacyBackscatterKind",
    "PacketRecord",
    "QuicHeader",
    "ServerConfig",
    "Session",
    "SnapshotSet",
    "Thresholds",
    "detect_attacks",
    "extrapolate_rate",
    "parse_long_header",
    "simulate",
    "timeout_sweep",
]
