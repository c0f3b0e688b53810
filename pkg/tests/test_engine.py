"""Engine behavior: probes, loopback test runs, cross-traffic accounting."""

import socket
import threading
import time

import pytest

from linerate import engine as engine_mod
from linerate import metrics, protocol
from linerate.engine import (
    Engine,
    RawTestRecord,
    UnreachableTargetError,
    cross_traffic_threshold_bps,
    read_interface_byte_counters,
)
from linerate.responder import Responder


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def quiet_engine() -> Engine:
    # Scripted flat counter: no cross traffic, no dependence on host interfaces.
    return Engine(counter_provider=lambda: 0)


def run_loopback(responder, **spec_overrides) -> RawTestRecord:
    defaults = dict(target="%s:%d" % responder.address, duration=2.0)
    defaults.update(spec_overrides)
    return quiet_engine().run_test(engine_mod.TestSpec(**defaults), cross_window_s=0.1)


@pytest.fixture
def responder():
    server = Responder("127.0.0.1", 0).start()
    yield server
    server.stop()


class EchoSkipServer:
    """Answers every echo except the given probe numbers. One connection."""

    def __init__(self, skip: set):
        self._skip = skip
        self._listener = socket.socket()
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(1)
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        conn, _ = self._listener.accept()
        with conn:
            seen = 0
            while True:
                try:
                    kind, nonce, payload = protocol.recv_frame(conn)
                except (ConnectionError, OSError):
                    return
                if kind != protocol.ECHO:
                    continue
                if seen not in self._skip:
                    protocol.send_frame(conn, protocol.ECHO_REPLY, nonce, payload)
                seen += 1

    def close(self):
        self._listener.close()


class ResetMidTransferServer:
    """Acks the handshake, then hard-resets every data connection early."""

    def __init__(self):
        self._listener = socket.socket()
        self._listener.bind(("127.0.0.1", 0))
        self._listener.listen(16)
        self.address = "%s:%d" % self._listener.getsockname()[:2]
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def _serve(self):
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(conn,), daemon=True).start()

    def _handle(self, conn):
        try:
            kind, nonce, payload = protocol.recv_frame(conn)
            if kind == protocol.ECHO:
                protocol.send_frame(conn, protocol.ECHO_REPLY, nonce, payload)
                while True:
                    kind, nonce, payload = protocol.recv_frame(conn)
                    if kind == protocol.ECHO:
                        protocol.send_frame(conn, protocol.ECHO_REPLY, nonce, payload)
                    else:
                        return
            if kind == protocol.HELLO:
                protocol.send_frame(conn, protocol.HELLO_ACK, nonce, protocol.pack_load(1, 8))
                while True:
                    kind, _n, _p = protocol.recv_frame(conn)
                    if kind == protocol.DONE:
                        protocol.send_frame(conn, protocol.DONE, nonce,
                                            protocol.pack_done_summary([]))
            elif kind == protocol.START_DATA:
                conn.sendall(b"\x42" * 65536)
                time.sleep(0.3)
                # RST instead of FIN: an abrupt mid-test connection loss.
                conn.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER,
                                b"\x01\x00\x00\x00\x00\x00\x00\x00")
                conn.close()
        except (ConnectionError, OSError):
            pass

    def close(self):
        self._listener.close()


class TestSpecValidation:
    def test_defaults_meet_recommended_floor(self):
        spec = engine_mod.TestSpec(target="example.net:7777")
        assert spec.n_connections >= 4
        assert spec.duration >= 5.0
        assert spec.direction == "download"

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            engine_mod.TestSpec(target="example.net:7777", direction="sideways")
        with pytest.raises(ValueError):
            engine_mod.TestSpec(target="example.net:7777", duration=0)
        with pytest.raises(ValueError):
            engine_mod.TestSpec(target="example.net:7777", n_connections=0)
        with pytest.raises(ValueError):
            engine_mod.TestSpec(target="example.net:7777", sample_interval=20_000, duration=10)
        with pytest.raises(ValueError):
            engine_mod.TestSpec(target="no-port-here")
        with pytest.raises(ValueError):
            engine_mod.TestSpec(target="example.net:7777", nonce=b"short")

    def test_serializes_round_trip(self):
        spec = engine_mod.TestSpec(target="198.51.100.7:7777", direction="upload",
                        duration=7.5, n_connections=6, target_id="srv-1")
        assert engine_mod.TestSpec.from_dict(spec.to_dict()) == spec

    def test_distinct_nonces_by_default(self):
        a = engine_mod.TestSpec(target="example.net:7777")
        b = engine_mod.TestSpec(target="example.net:7777")
        assert a.nonce != b.nonce


class TestProbeLatency:
    def test_loopback_ten_probes_all_answered(self, responder):
        stats = quiet_engine().probe_latency("%s:%d" % responder.address, count=10)
        assert stats.sent == 10
        assert stats.received == 10
        assert all(rtt < 5.0 for rtt in stats.rtts)
        assert metrics.loss_rate(stats.sent, stats.received) == 0.0

    def test_unreachable_port_raises(self):
        with pytest.raises(UnreachableTargetError):
            quiet_engine().probe_latency(f"127.0.0.1:{free_port()}", count=5)

    def test_nine_of_ten_answers_is_ten_percent_loss(self, monkeypatch):
        monkeypatch.setattr(engine_mod, "PROBE_TIMEOUT_S", 0.3)
        server = EchoSkipServer(skip={3})
        try:
            stats = quiet_engine().probe_latency(server.address, count=10, interval_ms=5)
        finally:
            server.close()
        assert stats.sent == 10
        assert stats.received == 9
        assert metrics.loss_rate(stats.sent, stats.received) == pytest.approx(0.1)

    def test_too_few_probes_rejected(self, responder):
        with pytest.raises(ValueError):
            quiet_engine().probe_latency("%s:%d" % responder.address, count=4)


class TestCrossTraffic:
    def test_scripted_rate_measured_within_tolerance(self):
        # Counter advancing at exactly 50 Mbps, keyed to the same clock the
        # engine uses, so sleep jitter cancels out of the rate.
        provider = lambda: int(50e6 / 8 * time.monotonic())
        bps = Engine(counter_provider=provider).measure_cross_traffic(window=0.25)
        assert bps == pytest.approx(50e6, rel=0.2)

    def test_own_session_bytes_are_subtracted(self):
        eng = Engine(counter_provider=lambda: int(100e6 / 8 * time.monotonic()))
        window = 0.25
        own_bytes = int(100e6 / 8 * window * 0.5)  # half the counter's advance

        def credit_during_window():
            time.sleep(window / 3)
            eng._credit_own_bytes(own_bytes)

        threading.Thread(target=credit_during_window, daemon=True).start()
        bps = eng.measure_cross_traffic(window=window)
        assert bps == pytest.approx(50e6, rel=0.25)

    def test_unavailable_provider_returns_none(self):
        assert Engine(counter_provider=lambda: None).measure_cross_traffic(0.05) is None

    def test_missing_counter_file_reads_none(self, tmp_path):
        assert read_interface_byte_counters(str(tmp_path / "nope")) is None

    def test_counter_file_parsing(self, tmp_path):
        counters = tmp_path / "dev"
        counters.write_text(
            "Inter-|   Receive                |  Transmit\n"
            " face |bytes packets errs drop fifo frame compressed multicast|"
            "bytes packets errs drop fifo colls carrier compressed\n"
            "    lo: 999999 10 0 0 0 0 0 0 999999 10 0 0 0 0 0 0\n"
            "  eth0: 1000 10 0 0 0 0 0 0 2000 10 0 0 0 0 0 0\n"
            "  eth1: 300 1 0 0 0 0 0 0 700 1 0 0 0 0 0 0\n"
        )
        # Loopback is excluded; eth0 and eth1 rx+tx sum remains.
        assert read_interface_byte_counters(str(counters)) == 1000 + 2000 + 300 + 700

    def test_idle_host_measures_quiet(self):
        if read_interface_byte_counters() is None:
            pytest.skip("host interface counters not readable")
        bps = Engine().measure_cross_traffic(window=1.0)
        assert bps is not None
        assert bps < 1e6

    def test_threshold_rule(self):
        assert cross_traffic_threshold_bps(None) == 5e6
        assert cross_traffic_threshold_bps(1e9) == 50e6
        assert cross_traffic_threshold_bps(1e6) == 5e6  # floor wins on slow links


class TestRunTest:
    def test_download_aggregate_dominates_each_connection(self, responder):
        record = run_loopback(responder, n_connections=4)
        aggregate = metrics.estimate_throughput(record.aggregate_trace, metrics.EstimationMethod())
        assert aggregate > 0
        for trace in record.per_connection_traces:
            assert aggregate >= metrics.estimate_throughput(trace, metrics.EstimationMethod())

    def test_aggregate_is_exact_sum_at_every_instant(self, responder):
        record = run_loopback(responder, n_connections=4)
        for k, (t_ms, total) in enumerate(record.aggregate_trace.samples):
            sample_sum = sum(trace.samples[k][1] for trace in record.per_connection_traces)
            assert total == sample_sum
            assert all(trace.samples[k][0] == t_ms for trace in record.per_connection_traces)

    def test_trace_covers_requested_duration(self, responder):
        record = run_loopback(responder, n_connections=2, duration=1.5)
        assert record.aggregate_trace.duration_ms == pytest.approx(1500.0)
        assert record.aggregate_trace.sample_interval == 100.0
        assert len(record.aggregate_trace.samples) == 16  # t=0 plus 15 ticks

    def test_wall_clock_is_time_bounded(self, responder):
        started = time.monotonic()
        run_loopback(responder, n_connections=2, duration=1.0)
        elapsed = time.monotonic() - started
        # probe (~0.2 s) + cross window (0.1 s) + transfer (1.0 s) + teardown
        assert elapsed < 3.5

    def test_upload_moves_bytes_and_server_agrees(self, responder):
        record = run_loopback(responder, direction="upload", n_connections=2)
        client_total = record.aggregate_trace.total_bytes
        assert client_total > 0
        assert record.server_summary is not None
        server_total = sum(entry[1] for entry in record.server_summary)
        # The server can only have drained what the client sent; in-flight
        # bytes at the cutoff keep the two counts close but not equal.
        assert 0 < server_total <= client_total * 1.01
        assert server_total > client_total * 0.5

    def test_server_load_reported(self, responder):
        record = run_loopback(responder, n_connections=1)
        assert engine_mod.FLAG_SERVER_LOAD in record.flags
        assert record.server_load == (1, responder.max_tests)

    def test_below_recommended_connections_flagged(self, responder):
        record = run_loopback(responder, n_connections=1)
        assert engine_mod.FLAG_FEW_CONNECTIONS in record.flags
        record4 = run_loopback(responder, n_connections=4)
        assert engine_mod.FLAG_FEW_CONNECTIONS not in record4.flags

    def test_two_sequential_runs_agree_within_twenty_percent(self, responder):
        first = run_loopback(responder, n_connections=4)
        second = run_loopback(responder, n_connections=4)
        a = metrics.estimate_throughput(first.aggregate_trace, metrics.EstimationMethod())
        b = metrics.estimate_throughput(second.aggregate_trace, metrics.EstimationMethod())
        assert abs(a - b) / max(a, b) < 0.2

    def test_refused_when_server_full(self):
        with Responder("127.0.0.1", 0, max_tests=1) as server:
            holder = socket.create_connection(server.address)
            try:
                protocol.send_frame(holder, protocol.HELLO, b"\x07" * 16,
                                    protocol.pack_hello("download", 30_000, 1))
                assert protocol.recv_frame(holder)[0] == protocol.HELLO_ACK
                with pytest.raises(engine_mod.TestRefusedError) as excinfo:
                    run_loopback(server, n_connections=1)
                assert excinfo.value.reason == "at_capacity"
            finally:
                holder.close()

    def test_unreachable_target_raises(self):
        eng = quiet_engine()
        spec = engine_mod.TestSpec(target=f"127.0.0.1:{free_port()}", duration=1.0)
        with pytest.raises(UnreachableTargetError):
            eng.run_test(spec, cross_window_s=0.05)

    def test_connection_loss_flags_degenerate_trace(self):
        server = ResetMidTransferServer()
        try:
            record = quiet_engine().run_test(
                engine_mod.TestSpec(target=server.address, duration=1.5, n_connections=2),
                cross_window_s=0.05,
            )
        finally:
            server.close()
        assert engine_mod.FLAG_DEGENERATE in record.flags

    def test_unknown_counter_source_flags_and_proceeds(self, responder):
        eng = Engine(counter_provider=lambda: None)
        spec = engine_mod.TestSpec(target="%s:%d" % responder.address, duration=1.0, n_connections=2)
        record = eng.run_test(spec, cross_window_s=0.05)
        assert record.cross_traffic_bps is None
        assert engine_mod.FLAG_CROSS_UNKNOWN in record.flags
        assert engine_mod.FLAG_CROSS_TRAFFIC not in record.flags

    def test_heavy_background_rate_flags_cross_traffic(self, responder):
        eng = Engine(counter_provider=lambda: int(80e6 / 8 * time.monotonic()))
        spec = engine_mod.TestSpec(target="%s:%d" % responder.address, duration=1.0, n_connections=2)
        record = eng.run_test(spec, cross_window_s=0.2)
        assert engine_mod.FLAG_CROSS_TRAFFIC in record.flags
        assert record.cross_traffic_bps > 5e6

    def test_engine_rejects_concurrent_runs(self, responder):
        eng = quiet_engine()
        assert eng._busy.acquire(blocking=False)
        try:
            spec = engine_mod.TestSpec(target="%s:%d" % responder.address, duration=1.0)
            with pytest.raises(RuntimeError):
                eng.run_test(spec)
        finally:
            eng._busy.release()
