import math
import random
from collections import defaultdict

import pytest

from quicwatch.sessionize import sessionize, timeout_sweep
from quicwatch.wire import PacketRecord, Proto

from conftest import random_trace, response_packet


def brute_force_sessions(packets, timeout_secs) -> list[tuple[str, int, int, int]]:
    """Independent oracle: per source, split on every gap > timeout.

    Returns sorted (src_ip, first_ts, last_ts, packet_count) tuples.
    """
    by_src: dict[str, list[int]] = defaultdict(list)
    for p in packets:
        by_src[p.src_ip].append(p.ts)
    timeout_us = timeout_secs * 1_000_000
    out = []
    for src, times in by_src.items():
        times = sorted(times)
        runs = [[times[0]]]
        for prev, cur in zip(times, times[1:]):
            if cur - prev > timeout_us:
                runs.append([cur])
            else:
                runs[-1].append(cur)
        out.extend((src, run[0], run[-1], len(run)) for run in runs)
    return sorted(out)


def as_tuples(sessions):
    return sorted((s.src_ip, s.first_ts, s.last_ts, s.packet_count) for s in sessions)


def seconds(*ts_list, src="4.4.4.4"):
    return [response_packet(int(t * 1_000_000), src) for t in ts_list]


class TestSessionize:
    def test_single_session(self):
        sessions = sessionize(seconds(0, 100, 200), 300)
        assert len(sessions) == 1
        s = sessions[0]
        assert s.packet_count == 3
        assert s.duration == 200.0

    def test_boundary_gap_equal_timeout_keeps(self):
        assert len(sessionize(seconds(0, 300), 300)) == 1

    def test_boundary_gap_above_timeout_splits(self):
        sessions = sessionize(seconds(0, 301), 300)
        assert len(sessions) == 2
        assert all(s.packet_count == 1 for s in sessions)

    def test_single_packet_session_stats(self):
        s = sessionize(seconds(42), 300)[0]
        assert s.duration == 0.0
        assert s.max_pps == pytest.approx(1 / 60)

    def test_max_pps_wall_clock_slots(self):
        # 30 packets in minute 0, 90 packets in minute 3
        packets = seconds(*[i * 2 for i in range(30)])
        packets += seconds(*[180 + i * 0.6 for i in range(90)])
        s = sessionize(sorted(packets, key=lambda p: p.ts), 300)[0]
        assert s.max_pps == pytest.approx(90 / 60)

    def test_slots_align_to_wall_clock_not_session_start(self):
        # 40 packets straddling the minute boundary at t=60: 20 in each slot
        packets = seconds(*[50 + i * 0.5 for i in range(40)])
        s = sessionize(packets, 300)[0]
        assert s.max_pps == pytest.approx(20 / 60)

    def test_oracle_equivalence_random_traces(self, rng):
        for _ in range(10):
            packets = random_trace(rng, rng.randint(1, 50), rng.randint(1, 3000))
            for timeout in (60, 300, 900):
                assert as_tuples(sessionize(packets, timeout)) == brute_force_sessions(packets, timeout)

    def test_packet_conservation(self, rng):
        packets = random_trace(rng, 40, 5000)
        sessions = sessionize(packets, 300)
        assert sum(s.packet_count for s in sessions) == len(packets)

    def test_interleaving_independence(self, rng):
        packets = random_trace(rng, 20, 2000)
        base = as_tuples(sessionize(packets, 120))
        # stable re-sort with different tiebreak interleaves sources differently
        shuffled = sorted(packets, key=lambda p: (p.ts, p.src_ip))
        assert as_tuples(sessionize(shuffled, 120)) == base
        shuffled = sorted(packets, key=lambda p: (p.ts, p.dst_port))
        assert as_tuples(sessionize(shuffled, 120)) == base

    def test_jobs_partitions_identical(self, rng):
        packets = random_trace(rng, 64, 4000)
        single = sessionize(packets, 300, "response", jobs=1)
        parallel = sessionize(packets, 300, "response", jobs=8)
        assert single == parallel

    def test_max_pps_slot_coverage_bound(self, rng):
        # a d-second span can straddle floor(d/60)+2 wall-aligned slots,
        # so the sound coverage bound divides by duration+120
        packets = random_trace(rng, 30, 4000)
        for s in sessionize(packets, 300):
            assert s.max_pps >= s.packet_count / (s.duration + 120) - 1e-12

    def test_distinct_destination_stats(self):
        packets = [
            response_packet(0, "4.4.4.4", "10.0.0.1", dport=1000),
            response_packet(1_000_000, "4.4.4.4", "10.0.0.2", dport=1000),
            response_packet(2_000_000, "4.4.4.4", "10.0.0.2", dport=2000),
        ]
        s = sessionize(packets, 300)[0]
        assert s.distinct_dst_ips == 2
        assert s.distinct_dst_ports == 2

    def test_quic_stats_collected_for_responses(self):
        from quicwatch.wire import build_long_header_packet, PacketType

        scid_a = b"\x01" * 8
        scid_b = b"\x02" * 8
        packets = [
            response_packet(0, "4.4.4.4", payload=build_long_header_packet(PacketType.INITIAL, b"", scid_a)),
            response_packet(1, "4.4.4.4", payload=build_long_header_packet(PacketType.HANDSHAKE, b"", scid_b)),
        ]
        s = sessionize(packets, 300)[0]
        assert s.distinct_scids == 2
        assert s.quic_versions == {1: 2}
        assert s.message_counts.initial == 1
        assert s.message_counts.handshake == 1

    def test_rejects_bad_timeout(self):
        with pytest.raises(ValueError):
            sessionize([], 0)
        with pytest.raises(ValueError):
            sessionize([], -5)


class TestTimeoutSweep:
    def test_matches_sessionize_counts(self, rng):
        packets = random_trace(rng, 30, 2500)
        sweep = timeout_sweep(packets, [60, 120, 300, 900])
        for timeout, count in sweep:
            if math.isinf(timeout):
                continue
            assert count == len(sessionize(packets, timeout))

    def test_monotone_non_increasing(self, rng):
        for _ in range(5):
            packets = random_trace(rng, rng.randint(1, 40), rng.randint(1, 2000))
            counts = [n for _, n in timeout_sweep(packets, [60 * m for m in range(1, 61)])]
            assert counts == sorted(counts, reverse=True)

    def test_infinity_entry_equals_source_count(self, rng):
        packets = random_trace(rng, 25, 800)
        sweep = timeout_sweep(packets, [60])
        timeout, count = sweep[-1]
        assert math.isinf(timeout)
        assert count == len({p.src_ip for p in packets})

    def test_single_packet_sources_constant(self):
        packets = sorted(
            (response_packet(i * 1_000_000, f"10.0.0.{i}") for i in range(1, 30)),
            key=lambda p: p.ts,
        )
        sweep = timeout_sweep(packets, [1, 60, 600, 3600])
        assert {count for _, count in sweep} == {29}

    def test_knee_visible_around_gap_scale(self, rng):
        # gaps drawn around 5 minutes: counts drop steeply until ~300s
        local = random.Random(7)
        packets = []
        for src_i in range(20):
            ts = 0
            for _ in range(50):
                ts += int(local.gauss(300, 60) * 1_000_000)
                packets.append(response_packet(max(0, ts), f"10.9.0.{src_i}"))
        packets.sort(key=lambda p: p.ts)
        sweep = dict(timeout_sweep(packets, [60, 300, 540, 3600]))
        drop_before_knee = sweep[60.0] - sweep[300.0]
        drop_after_knee = sweep[540.0] - sweep[3600.0]
        assert drop_before_knee > drop_after_knee

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            timeout_sweep([], [])
        with pytest.raises(ValueError):
            timeout_sweep([], [60, -1])
