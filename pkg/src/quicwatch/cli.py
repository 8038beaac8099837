"""Command-line entry point.

Subcommands run the analysis chain at increasing depth (dissect,
analyze, attacks, correlate, report) plus the flood simulator. Every
artifact is written as CSV/JSON with canonical ordering so repeated
runs on the same input are byte-identical regardless of --jobs.

Exit codes: 0 success, 1 config error, 2 ingest error, 3 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from collections import Counter

from . import classify, correlate, detect, floodlab, report, sessionize, wire

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INGEST = 2
EXIT_INTERNAL = 3

_DEFAULT_SWEEP_WEIGHTS = (0.1, 0.3, 1.0, 3.0, 10.0)


class ConfigError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def _parse_number_list(raw: str, kind=float) -> list:
    try:
        return [kind(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list value {raw!r}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quicwatch",
        description="QUIC DoS flood detection from telescope backscatter, plus a handshake-flood simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_io(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", required=True, help="capture file")
            p.add_argument("--format", choices=("pcap", "ndjson"), default="ndjson")
        p.add_argument("--out-dir", default=".", help="artifact output directory")
        p.add_argument("--snapshots-dir", help="directory with enrichment snapshot CSVs")
        p.add_argument("--jobs", type=int, default=1, help="parallel partitions for sessionization")

    def add_analysis(p):
        p.add_argument("--timeout-secs", type=float, default=sessionize.DEFAULT_TIMEOUT_SECS)
        p.add_argument("--sweep", help="comma-separated timeout sweep values in seconds")
        p.add_argument("--scanner-asn-list", default="", help="comma-separated ASNs and/or CIDR prefixes")
        p.add_argument("--coverage-fraction", type=float, default=0.5)
        p.add_argument("--max-pkts-per-dst", type=int, default=2)
        p.add_argument("--telescope-size", type=int, default=2**23)

    def add_detect(p):
        p.add_argument("--min-packets", type=float, default=25.0)
        p.add_argument("--min-duration", type=float, default=60.0)
        p.add_argument("--min-maxpps", type=float, default=0.5)
        p.add_argument("--weight", type=float, default=1.0)
        p.add_argument("--weights", help="comma-separated weights for the threshold sweep")
        p.add_argument("--telescope-fraction", type=float, default=detect.DEFAULT_TELESCOPE_FRACTION)

    for name, depth in (("dissect", 0), ("analyze", 1), ("attacks", 2), ("correlate", 3), ("report", 4)):
        p = sub.add_parser(name, help=f"run the pipeline through the {name} stage")
        add_io(p)
        if depth >= 1:
            add_analysis(p)
        if depth >= 2:
            add_detect(p)
        p.set_defaults(depth=depth)

    sim = sub.add_parser("simulate", help="deterministic QUIC handshake-flood benchmark")
    sim.add_argument("--workers", type=int, default=4)
    sim.add_argument("--conns-per-worker", type=int, default=1024)
    sim.add_argument("--hold-secs", type=float, default=60.0)
    sim.add_argument("--retry", action="store_true")
    sim.add_argument("--rate", type=float, default=1000.0)
    sim.add_argument("--requests", type=int, default=300_001)
    sim.add_argument("--legit-fraction", type=float, default=0.0)
    sim.add_argument("--spoof-pool", type=int, default=65_536)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--emit-trace", help="write in-telescope backscatter ndjson to this path")
    sim.add_argument("--telescope-fraction", type=float, default=detect.DEFAULT_TELESCOPE_FRACTION)
    sim.add_argument("--out-dir", default=".")
    return parser


class Pipeline:
    """Sequential stages over one capture; artifacts land in out_dir."""

    def __init__(self, args):
        self.args = args
        self.written: list[str] = []
        self.stage = "config"
        if not os.path.exists(args.input):
            raise ConfigError(f"input file not found: {args.input}")
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        os.makedirs(args.out_dir, exist_ok=True)
        self.snapshots = classify.SnapshotSet()
        if args.snapshots_dir:
            if not os.path.isdir(args.snapshots_dir):
                raise ConfigError(f"snapshots dir not found: {args.snapshots_dir}")
            self.snapshots = classify.SnapshotSet.load(args.snapshots_dir)
        if getattr(args, "depth", 0) >= 2:
            try:
                self.thresholds = detect.Thresholds(
                    args.min_packets, args.min_duration, args.min_maxpps, args.weight
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            if not 0 < args.telescope_fraction <= 1:
                raise ConfigError("--telescope-fraction must be in (0, 1]")

    def _out(self, name: str) -> str:
        path = os.path.join(self.args.out_dir, name)
        self.written.append(path)
        return path

    def cleanup(self) -> None:
        for path in self.written:
            try:
                os.unlink(path)
            except OSError:
                pass

    def run(self, depth: int) -> dict:
        stages = [("ingest", self._ingest), ("classify", self._classify)]
        if depth >= 1:
            stages.append(("sessionize", self._sessionize))
        if depth >= 2:
            stages.append(("detect", self._detect))
        if depth >= 3:
            stages.append(("correlate", self._correlate))
        stages.append(("write", lambda: self._write(depth)))
        for name, fn in stages:
            self.stage = name
            try:
                fn()
            except Exception as exc:
                self.cleanup()
                raise StageError(name, exc) from exc
        return self.summary

    # --- stages ---

    def _ingest(self):
        reader = wire.CaptureReader(self.args.input, self.args.format)
        self.records = list(reader)
        self.stats = reader.stats

    def _classify(self):
        self.requests: list[wire.PacketRecord] = []
        self.responses: list[wire.PacketRecord] = []
        self.tcp_back: list[wire.PacketRecord] = []
        self.icmp_back: list[wire.PacketRecord] = []
        counts = Counter()
        for p in self.records:
            direction = classify.classify_direction(p)
            if direction is classify.Direction.REQUEST:
                self.requests.append(p)
            elif direction is classify.Direction.RESPONSE:
                self.responses.append(p)
            elif direction is classify.Direction.AMBIGUOUS:
                counts["ambiguous"] += 1
            else:
                kind = classify.classify_legacy(p)
                if kind in (classify.LegacyBackscatterKind.TCP_SYNACK, classify.LegacyBackscatterKind.TCP_RST):
                    self.tcp_back.append(p)
                elif kind in (
                    classify.LegacyBackscatterKind.ICMP_UNREACHABLE,
                    classify.LegacyBackscatterKind.ICMP_TTL_EXCEEDED,
                ):
                    self.icmp_back.append(p)
                else:
                    counts["other_non_quic"] += 1
        counts["packets"] = len(self.records)
        counts["requests"] = len(self.requests)
        counts["responses"] = len(self.responses)
        counts["tcp_backscatter"] = len(self.tcp_back)
        counts["icmp_backscatter"] = len(self.icmp_back)
        self.counts = counts

    def _sessionize(self):
        args = self.args
        jobs = args.jobs
        timeout = args.timeout_secs
        raw_request_sessions = sessionize.sessionize(self.requests, timeout, "request", jobs)
        cfg = classify.ScannerConfig.from_entries(
            args.scanner_asn_list.split(","),
            coverage_fraction=args.coverage_fraction,
            max_pkts_per_dst=args.max_pkts_per_dst,
            telescope_size=args.telescope_size,
        )
        profiles = classify.build_source_profiles(self.requests)
        self.request_sessions, self.removed_scanners = classify.filter_scanners(
            raw_request_sessions, cfg, profiles, self.snapshots
        )
        self.response_sessions = sessionize.sessionize(self.responses, timeout, "response", jobs)
        self.tcp_sessions = sessionize.sessionize(self.tcp_back, timeout, "tcp", jobs)
        self.icmp_sessions = sessionize.sessionize(self.icmp_back, timeout, "icmp", jobs)
        self.timeout_sweep = None
        if getattr(args, "sweep", None):
            timeouts = _parse_number_list(args.sweep)
            all_packets = sorted(
                self.requests + self.responses + self.tcp_back + self.icmp_back, key=lambda p: p.ts
            )
            self.timeout_sweep = sessionize.timeout_sweep(all_packets, timeouts)

    def _detect(self):
        enricher = lambda ip: classify.enrich(ip, self.snapshots)
        backscatter = self.response_sessions + self.tcp_sessions + self.icmp_sessions
        self.attacks = detect.detect_attacks(backscatter, self.thresholds, enricher)
        weights = (
            _parse_number_list(self.args.weights)
            if getattr(self.args, "weights", None)
            else list(_DEFAULT_SWEEP_WEIGHTS)
        )
        self.weight_sweep = detect.threshold_sweep(backscatter, weights, self.thresholds, enricher)
        quic_attacks = [a for a in self.attacks if a.protocol_class is detect.ProtocolClass.QUIC]
        self.recurrence = detect.victim_recurrence(quic_attacks)

    def _correlate(self):
        self.timelines = correlate.build_timelines(self.attacks)
        self.labeled = correlate.label_attacks(self.timelines)

    # --- artifact writing ---

    def _write(self, depth: int):
        args = self.args
        summary: dict = {"totals": dict(sorted(self.counts.items()))}
        summary["totals"]["skipped_frames"] = self.stats.skipped
        summary["totals"]["late_dropped"] = self.stats.late_dropped
        summary["ingest"] = self.stats.as_dict()

        if depth == 0:
            self._write_packets_csv()
            report.write_json(self._out("dissect.json"), summary)
            self.summary = summary
            return

        sessions = (
            self.request_sessions + self.response_sessions + self.tcp_sessions + self.icmp_sessions
        )
        report.write_csv(self._out("sessions.csv"), report.SESSION_HEADER, report.session_rows(sessions))
        summary["sessions"] = {
            "request": len(self.request_sessions),
            "response": len(self.response_sessions),
            "tcp": len(self.tcp_sessions),
            "icmp": len(self.icmp_sessions),
        }
        summary["totals"]["scanner_removed_sessions"] = len(self.removed_scanners)
        summary["totals"]["scanner_removed_packets"] = sum(
            s.packet_count for s, _ in self.removed_scanners
        )
        if self.timeout_sweep is not None:
            report.write_csv(
                self._out("timeout_sweep.csv"),
                ("timeout_secs", "session_count"),
                [("inf" if math.isinf(t) else t, n) for t, n in self.timeout_sweep],
            )

        if depth >= 2:
            report.write_csv(
                self._out("attacks.csv"),
                report.ATTACK_HEADER,
                report.attack_rows(self.attacks, args.telescope_fraction),
            )
            report.write_csv(
                self._out("sweep.csv"),
                ("weight", "attack_count", "content_provider_share"),
                self.weight_sweep,
            )
            recurrence_rows = sorted(
                self.recurrence.items(), key=lambda kv: (-kv[1], wire.ip_to_int(kv[0]))
            )
            report.write_csv(self._out("recurrence.csv"), ("victim_ip", "attack_count"), recurrence_rows)
            summary["attacks"] = {
                name.value: sum(1 for a in self.attacks if a.protocol_class is name)
                for name in detect.ProtocolClass
            }

        if depth >= 3:
            report.write_csv(self._out("labels.csv"), report.LABEL_HEADER, report.label_rows(self.labeled))
            overlap_values = [
                lbl.overlap_share for _, lbl in self.labeled if lbl.value is correlate.MultiVector.CONCURRENT
            ]
            gap_values = [
                lbl.nearest_gap for _, lbl in self.labeled if lbl.value is correlate.MultiVector.SEQUENTIAL
            ]
            report.write_csv(
                self._out("overlap_cdf.csv"), ("overlap_share", "cdf"), report.cdf_points(overlap_values)
            )
            report.write_csv(self._out("gap_cdf.csv"), ("gap_secs", "cdf"), report.cdf_points(gap_values))
            summary["labels"] = report.label_distribution(self.labeled)

        if depth >= 4:
            report.write_csv(
                self._out("duration_cdf.csv"),
                ("protocol_class", "duration_secs", "cdf"),
                report.class_cdf_rows(self.attacks, lambda a: a.duration),
            )
            report.write_csv(
                self._out("intensity_cdf.csv"),
                ("protocol_class", "max_pps", "cdf"),
                report.class_cdf_rows(self.attacks, lambda a: a.max_pps),
            )
            quic_attacks = [a for a in self.attacks if a.protocol_class is detect.ProtocolClass.QUIC]
            summary["medians"] = report.report_medians(self.attacks)
            summary["top_victims"] = report.top_victims(self.recurrence)
            summary["attack_message_composition"] = report.message_composition(quic_attacks)
            report.write_json(self._out("report.json"), summary)

        self.summary = summary

    def _write_packets_csv(self):
        header = (
            "ts_us",
            "src_ip",
            "src_port",
            "dst_ip",
            "dst_port",
            "proto",
            "direction",
            "packet_type",
            "version",
            "dcid_len",
            "scid_len",
            "coalesced_following",
        )
        rows = []
        for p in self.records:
            direction = classify.classify_direction(p)
            packet_type = version = dcid_len = scid_len = coalesced = ""
            if direction in (
                classify.Direction.REQUEST,
                classify.Direction.RESPONSE,
                classify.Direction.AMBIGUOUS,
            ) and p.payload:
                header_or_fail = wire.parse_long_header(p.payload)
                if isinstance(header_or_fail, wire.QuicHeader):
                    packet_type = header_or_fail.packet_type.value
                    version = f"0x{header_or_fail.version:08x}"
                    dcid_len = len(header_or_fail.dcid)
                    scid_len = len(header_or_fail.scid)
                    coalesced = int(header_or_fail.coalesced_following)
                else:
                    packet_type = "parse_failure"
            rows.append(
                (
                    p.ts,
                    p.src_ip,
                    p.src_port,
                    p.dst_ip,
                    p.dst_port,
                    p.proto.value,
                    direction.value,
                    packet_type,
                    version,
                    dcid_len,
                    scid_len,
                    coalesced,
                )
            )
        report.write_csv(self._out("packets.csv"), header, rows)


def _run_simulate(args) -> int:
    try:
        server = floodlab.ServerConfig(
            workers=args.workers,
            connections_per_worker=args.conns_per_worker,
            slot_hold_secs=args.hold_secs,
            retry_enabled=args.retry,
        )
        flood = floodlab.FloodConfig(
            rate_pps=args.rate,
            total_requests=args.requests,
            legit_fraction=args.legit_fraction,
            spoof_ip_pool=args.spoof_pool,
            seed=args.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    os.makedirs(args.out_dir, exist_ok=True)
    if args.emit_trace:
        result, written = floodlab.emit_backscatter_trace(
            server, flood, args.telescope_fraction, args.emit_trace
        )
        log.info("trace: %d datagrams -> %s", written, args.emit_trace)
    else:
        result = floodlab.simulate(server, flood)
    payload = result.as_dict()
    payload["config"] = {
        "server": {
            "workers": server.workers,
            "connections_per_worker": server.connections_per_worker,
            "slot_hold_secs": server.slot_hold_secs,
            "retry_enabled": server.retry_enabled,
            "initial_response_bytes": server.initial_response_bytes,
            "min_client_initial_bytes": server.min_client_initial_bytes,
            "server_ip": server.server_ip,
        },
        "flood": {
            "rate_pps": flood.rate_pps,
            "total_requests": flood.total_requests,
            "legit_fraction": flood.legit_fraction,
            "spoof_ip_pool": flood.spoof_ip_pool,
            "spoof_port_randomized": flood.spoof_port_randomized,
            "seed": flood.seed,
        },
    }
    report.write_json(os.path.join(args.out_dir, "bench.json"), payload)
    print(json.dumps(result.as_dict(), sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return _run_simulate(args)
        pipeline = Pipeline(args)
        summary = pipeline.run(args.depth)
        print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    except StageError as err:
        print(f"quicwatch: error [{err.stage}]: {err.cause}", file=sys.stderr)
        if isinstance(err.cause, (ConfigError, classify.SnapshotError)):
            return EXIT_CONFIG
        if isinstance(err.cause, wire.IngestError):
            return EXIT_INGEST
        return EXIT_INTERNAL
    except (ConfigError, classify.SnapshotError) as exc:
        print(f"quicwatch: error [config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except wire.IngestError as exc:
        print(f"quicwatch: error [ingest]: {exc}", file=sys.stderr)
        return EXIT_INGEST
    except Exception as exc:  # pragma: no cover - defensive
        print(f"quicwatch: error [internal]: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(main())
