import csv
import json
import os

import pytest

from quicwatch.cli import EXIT_CONFIG, EXIT_INGEST, EXIT_OK, main
from quicwatch.floodlab import plant_backscatter_trace
from quicwatch.wire import PacketRecord, Proto, write_ndjson

from conftest import pcap_bytes, response_packet, udp_frame


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    base = tmp_path_factory.mktemp("planted")
    path = base / "capture.ndjson"
    truth = plant_backscatter_trace(str(path), n_floods=6, n_noise=60, seed=21)
    return str(path), truth


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSubcommands:
    def test_dissect(self, planted, tmp_path):
        path, _ = planted
        assert main(["dissect", "--input", path, "--out-dir", str(tmp_path)]) == EXIT_OK
        rows = read_csv(tmp_path / "packets.csv")
        assert rows and all(r["direction"] == "response" for r in rows)
        summary = json.load(open(tmp_path / "dissect.json"))
        assert summary["totals"]["responses"] == len(rows)

    def test_analyze_writes_sessions(self, planted, tmp_path):
        path, truth = planted
        rc = main(["analyze", "--input", path, "--out-dir", str(tmp_path), "--sweep", "60,300,900"])
        assert rc == EXIT_OK
        rows = read_csv(tmp_path / "sessions.csv")
        assert {r["src_ip"] for r in rows} == set(truth.flood_victims) | set(truth.noise_sources)
        sweep = read_csv(tmp_path / "timeout_sweep.csv")
        assert sweep[-1]["timeout_secs"] == "inf"

    def test_attacks_recovers_planted(self, planted, tmp_path):
        path, truth = planted
        rc = main(["attacks", "--input", path, "--out-dir", str(tmp_path)])
        assert rc == EXIT_OK
        rows = read_csv(tmp_path / "attacks.csv")
        assert {r["victim_ip"] for r in rows} == set(truth.flood_victims)
        assert all(r["protocol_class"] == "QUIC" for r in rows)
        sweep = read_csv(tmp_path / "sweep.csv")
        counts = [int(r["attack_count"]) for r in sweep]
        assert counts == sorted(counts, reverse=True)

    def test_correlate_outputs(self, planted, tmp_path):
        path, _ = planted
        rc = main(["correlate", "--input", path, "--out-dir", str(tmp_path)])
        assert rc == EXIT_OK
        labels = read_csv(tmp_path / "labels.csv")
        assert all(r["label"] == "isolated" for r in labels)  # no legacy floods planted
        assert os.path.exists(tmp_path / "overlap_cdf.csv")
        assert os.path.exists(tmp_path / "gap_cdf.csv")

    def test_report_reconciles_with_csvs(self, planted, tmp_path):
        path, truth = planted
        assert main(["report", "--input", path, "--out-dir", str(tmp_path)]) == EXIT_OK
        report = json.load(open(tmp_path / "report.json"))
        sessions = read_csv(tmp_path / "sessions.csv")
        attacks = read_csv(tmp_path / "attacks.csv")
        assert report["sessions"]["response"] == sum(1 for r in sessions if r["label"] == "response")
        assert report["attacks"]["QUIC"] == len(attacks)
        assert report["attacks"]["QUIC"] == len(truth.flood_victims)
        assert report["totals"]["packets"] == sum(int(r["packet_count"]) for r in sessions)
        recurrence = read_csv(tmp_path / "recurrence.csv")
        assert sum(int(r["attack_count"]) for r in recurrence) == len(attacks)
        label_shares = report["labels"]
        assert sum(label_shares.values()) == pytest.approx(100.0)

    def test_simulate_bench_json(self, tmp_path):
        rc = main(
            [
                "simulate",
                "--workers", "4",
                "--rate", "10",
                "--requests", "3001",
                "--seed", "5",
                "--out-dir", str(tmp_path),
            ]
        )
        assert rc == EXIT_OK
        bench = json.load(open(tmp_path / "bench.json"))
        assert bench["availability"] == 1.0
        assert bench["response_datagrams"] == 12004
        assert bench["config"]["flood"]["rate_pps"] == 10.0

    def test_simulate_emit_trace(self, tmp_path):
        trace = tmp_path / "trace.ndjson"
        rc = main(
            [
                "simulate",
                "--rate", "500",
                "--requests", "2000",
                "--seed", "6",
                "--emit-trace", str(trace),
                "--telescope-fraction", "0.25",
                "--out-dir", str(tmp_path),
            ]
        )
        assert rc == EXIT_OK
        assert trace.exists() and trace.read_text()


class TestEdgeCases:
    def test_empty_input(self, tmp_path):
        empty = tmp_path / "empty.ndjson"
        empty.write_text("")
        out = tmp_path / "out"
        assert main(["report", "--input", str(empty), "--out-dir", str(out)]) == EXIT_OK
        report = json.load(open(out / "report.json"))
        assert report["totals"]["packets"] == 0
        assert report["attacks"] == {"ICMP": 0, "QUIC": 0, "TCP": 0}
        for name in ("sessions.csv", "attacks.csv", "labels.csv", "recurrence.csv"):
            lines = (out / name).read_text().splitlines()
            assert len(lines) == 1  # header only

    def test_missing_input_is_config_error(self, tmp_path):
        rc = main(["analyze", "--input", str(tmp_path / "nope.ndjson"), "--out-dir", str(tmp_path)])
        assert rc == EXIT_CONFIG

    def test_bad_pcap_is_ingest_error(self, tmp_path):
        bad = tmp_path / "bad.pcap"
        bad.write_bytes(b"this is not a pcap file at all")
        rc = main(["analyze", "--input", str(bad), "--format", "pcap", "--out-dir", str(tmp_path)])
        assert rc == EXIT_INGEST

    def test_failed_run_removes_partial_outputs(self, tmp_path):
        bad = tmp_path / "bad.pcap"
        bad.write_bytes(b"x" * 100)
        out = tmp_path / "out"
        main(["report", "--input", str(bad), "--format", "pcap", "--out-dir", str(out)])
        assert not any(out.iterdir())

    def test_broken_snapshot_is_config_error(self, planted, tmp_path):
        path, _ = planted
        snapdir = tmp_path / "snaps"
        snapdir.mkdir()
        (snapdir / "prefixes.csv").write_text("wrong,header\n1,2\n")
        rc = main(["analyze", "--input", path, "--out-dir", str(tmp_path), "--snapshots-dir", str(snapdir)])
        assert rc == EXIT_CONFIG

    def test_invalid_threshold_flag(self, planted, tmp_path):
        path, _ = planted
        rc = main(["attacks", "--input", path, "--out-dir", str(tmp_path), "--weight", "0"])
        assert rc == EXIT_CONFIG

    def test_pcap_pipeline(self, tmp_path):
        frames = [udp_frame(ts * 1_000_000, "198.51.100.3", 443, "192.0.2.4", 4000 + ts) for ts in range(120)]
        cap = tmp_path / "resp.pcap"
        cap.write_bytes(pcap_bytes(frames))
        out = tmp_path / "out"
        assert main(["attacks", "--input", str(cap), "--format", "pcap", "--out-dir", str(out)]) == EXIT_OK
        attacks = read_csv(out / "attacks.csv")
        assert len(attacks) == 1  # 120 packets over 119 s at 1 pps


class TestScannerWiring:
    def test_scanner_source_removed_from_sessions(self, tmp_path):
        packets = []
        for i in range(300):  # wide single-packet scan
            packets.append(
                PacketRecord(i * 1000, "77.7.7.7", f"192.0.2.{i % 250 + 1}", Proto.UDP, 40000, 443, ip_len=40)
            )
        for k in range(8):  # small benign requester
            packets.append(
                PacketRecord(k * 1_000_000, "88.8.8.8", "192.0.2.1", Proto.UDP, 40000, 443, ip_len=40)
            )
        packets.sort(key=lambda p: p.ts)
        cap = tmp_path / "req.ndjson"
        write_ndjson(packets, str(cap))
        out = tmp_path / "out"
        rc = main(
            [
                "analyze",
                "--input", str(cap),
                "--out-dir", str(out),
                "--telescope-size", "400",
                "--coverage-fraction", "0.5",
            ]
        )
        assert rc == EXIT_OK
        rows = read_csv(out / "sessions.csv")
        assert {r["src_ip"] for r in rows} == {"88.8.8.8"}

    def test_scanner_removed_count_in_report(self, tmp_path, capsys):
        packets = [
            PacketRecord(i * 1000, "77.7.7.7", f"192.0.2.{i % 250 + 1}", Proto.UDP, 40000, 443, ip_len=40)
            for i in range(300)
        ]
        cap = tmp_path / "req.ndjson"
        write_ndjson(packets, str(cap))
        out = tmp_path / "out"
        rc = main(["report", "--input", str(cap), "--out-dir", str(out), "--telescope-size", "400"])
        assert rc == EXIT_OK
        report = json.load(open(out / "report.json"))
        assert report["totals"]["scanner_removed_sessions"] == 1
        assert report["totals"]["scanner_removed_packets"] == 300


class TestDeterminism:
    def test_jobs_do_not_change_output_bytes(self, planted, tmp_path):
        path, _ = planted
        out1, out8 = tmp_path / "j1", tmp_path / "j8"
        assert main(["report", "--input", path, "--out-dir", str(out1), "--jobs", "1"]) == EXIT_OK
        assert main(["report", "--input", path, "--out-dir", str(out8), "--jobs", "8"]) == EXIT_OK
        names = sorted(os.listdir(out1))
        assert names == sorted(os.listdir(out8))
        for name in names:
            assert (out1 / name).read_bytes() == (out8 / name).read_bytes(), name
