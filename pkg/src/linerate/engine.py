"""Active measurement client.

Runs a parallel-connection transfer against a responder, samples every
connection's byte counter on one shared monotonic clock, probes latency on a
fresh connection beforehand, and checks interface counters for competing
traffic so a polluted measurement is flagged instead of silently reported.

The engine only collects raw data.  Every derived number (throughput,
jitter, steady-state detection) comes from the metrics module, so the
methodology behind a result is always inspectable and replaceable.
"""

import logging
import os
import random
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field

from . import protocol
from .flowmodel import MEASURED, ThroughputTrace
from .metrics import LatencyStats

log = logging.getLogger(__name__)

DEFAULT_DURATION_S = 10.0
DEFAULT_N_CONNECTIONS = 4  # fewer cannot reliably fill typical access links
DEFAULT_SAMPLE_INTERVAL_MS = 100.0
RECOMMENDED_MIN_CONNECTIONS = 4
PROBE_COUNT_DEFAULT = 10
PROBE_COUNT_MIN = 5
PROBE_TIMEOUT_S = 2.0
CONNECT_TIMEOUT_S = 10.0

CROSS_TRAFFIC_WINDOW_S = 2.0
CROSS_TRAFFIC_CAPACITY_FRACTION = 0.05
CROSS_TRAFFIC_FLOOR_BPS = 5e6
DEFAULT_COUNTER_PATH = "/proc/net/dev"

CHUNK_BYTES = 256 * 1024
UPLOAD_POOL_BYTES = 4 * 1024 * 1024

FLAG_CROSS_TRAFFIC = "cross_traffic_detected"
FLAG_CROSS_UNKNOWN = "cross_traffic_unknown"
FLAG_DEGENERATE = "degenerate_trace"
FLAG_SERVER_LOAD = "server_load_reported"
FLAG_FEW_CONNECTIONS = "below_recommended_connections"


class UnreachableTargetError(Exception):
    """Target did not accept a connection or never answered."""


class TestRefusedError(Exception):
    """Responder explicitly refused the test."""

    def __init__(self, reason: str):
        super().__init__(f"test refused: {reason}")
        self.reason = reason


def _parse_target(target: str) -> tuple[str, int]:
    host, _, port_text = target.rpartition(":")
    if not host:
        raise ValueError(f"target must be host:port, got {target!r}")
    return host, int(port_text)


@dataclass(frozen=True)
class TestSpec:
    """Everything needed to reproduce one test, fully serializable."""

    target: str  # host:port
    direction: str = "download"
    duration: float = DEFAULT_DURATION_S  # seconds
    n_connections: int = DEFAULT_N_CONNECTIONS
    sample_interval: float = DEFAULT_SAMPLE_INTERVAL_MS  # ms
    warmup_excluded: bool = True
    target_id: str = ""
    nonce: bytes = field(default_factory=lambda: uuid.uuid4().bytes)

    def __post_init__(self):
        if self.direction not in ("download", "upload"):
            raise ValueError(f"direction must be download or upload, got {self.direction!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.n_connections < 1:
            raise ValueError("n_connections must be at least 1")
        if not 0 < self.sample_interval <= self.duration * 1000.0:
            raise ValueError("sample_interval must be positive and fit inside duration")
        if len(self.nonce) != protocol.NONCE_LEN:
            raise ValueError(f"nonce must be {protocol.NONCE_LEN} bytes")
        _parse_target(self.target)

    @property
    def host_port(self) -> tuple[str, int]:
        return _parse_target(self.target)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "direction": self.direction,
            "duration": self.duration,
            "n_connections": self.n_connections,
            "sample_interval": self.sample_interval,
            "warmup_excluded": self.warmup_excluded,
            "target_id": self.target_id,
            "nonce": self.nonce.hex(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TestSpec":
        fields = dict(data)
        fields["nonce"] = bytes.fromhex(fields["nonce"])
        return cls(**fields)


@dataclass(frozen=True)
class RawTestRecord:
    """Raw outcome of one test: traces, probe stats, and context flags only."""

    spec: TestSpec
    per_connection_traces: tuple[ThroughputTrace, ...]
    aggregate_trace: ThroughputTrace
    latency: LatencyStats
    cross_traffic_bps: float | None
    flags: frozenset[str]
    server_summary: tuple[tuple[int, int, int], ...] | None = None
    server_load: tuple[int, int] | None = None  # (active_tests, max_tests)
    started_at_monotonic: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "per_connection_traces", tuple(self.per_connection_traces))
        object.__setattr__(self, "flags", frozenset(self.flags))


def read_interface_byte_counters(path: str = DEFAULT_COUNTER_PATH):
    """Sum rx+tx bytes across non-loopback interfaces; None if unreadable."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError:
        return None
    total = 0
    parsed_any = False
    for line in lines:
        if ":" not in line:
            continue
        name, _, rest = line.partition(":")
        if name.strip() == "lo":
            continue
        cols = rest.split()
        if len(cols) < 9:
            continue
        try:
            total += int(cols[0]) + int(cols[8])  # rx bytes, tx bytes
        except ValueError:
            continue
        parsed_any = True
    return total if parsed_any else None


def cross_traffic_threshold_bps(capacity_hint_bps: float | None) -> float:
    if capacity_hint_bps:
        return max(CROSS_TRAFFIC_CAPACITY_FRACTION * capacity_hint_bps,
                   CROSS_TRAFFIC_FLOOR_BPS)
    return CROSS_TRAFFIC_FLOOR_BPS


class Engine:
    """One client-side test runner.  Not shareable across concurrent tests."""

    def __init__(self, counter_provider=None, counter_path: str = DEFAULT_COUNTER_PATH):
        if counter_provider is None:
            counter_provider = lambda: read_interface_byte_counters(counter_path)
        self._counter_provider = counter_provider
        self._own_bytes = 0  # bytes this engine moved, all sessions so far
        self._own_lock = threading.Lock()
        self._busy = threading.Lock()

    # -- latency ------------------------------------------------------------

    def probe_latency(self, target, count: int = PROBE_COUNT_DEFAULT,
                      interval_ms: float = 20.0) -> LatencyStats:
        """Echo-based RTT probe on a fresh connection; lost replies count as loss."""
        if count < PROBE_COUNT_MIN:
            raise ValueError(f"need at least {PROBE_COUNT_MIN} probes, got {count}")
        host, port = _parse_target(target) if isinstance(target, str) else target
        try:
            sock = socket.create_connection((host, port), timeout=CONNECT_TIMEOUT_S)
        except OSError as exc:
            raise UnreachableTargetError(f"cannot connect to {host}:{port}: {exc}") from exc
        rtts = []
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(PROBE_TIMEOUT_S)
            for i in range(count):
                payload = b"probe-%04d" % i
                sent_at = time.monotonic()
                protocol.send_frame(sock, protocol.ECHO, protocol.ZERO_NONCE, payload)
                try:
                    while True:
                        kind, _nonce, got = protocol.recv_frame(sock)
                        if kind == protocol.ECHO_REPLY and got == payload:
                            rtts.append((time.monotonic() - sent_at) * 1000.0)
                            break
                        # stale or foreign reply: keep reading until timeout
                except (TimeoutError, ConnectionError, protocol.ProtocolError):
                    pass  # this probe is lost; later ones may still succeed
                if i + 1 < count:
                    time.sleep(interval_ms / 1000.0)
        finally:
            sock.close()
        return LatencyStats(rtts=tuple(rtts), sent=count, received=len(rtts))

    # -- cross traffic --------------------------------------------------------

    def measure_cross_traffic(self, window: float = CROSS_TRAFFIC_WINDOW_S):
        """Mean non-test traffic rate (bps) over the window; None when unknown."""
        start_total = self._counter_provider()
        if start_total is None:
            return None
        with self._own_lock:
            own_start = self._own_bytes
        started = time.monotonic()
        time.sleep(window)
        end_total = self._counter_provider()
        if end_total is None:
            return None
        elapsed = time.monotonic() - started
        with self._own_lock:
            own_delta = self._own_bytes - own_start
        foreign = max(0, (end_total - start_total) - own_delta)
        return 8.0 * foreign / elapsed

    def _credit_own_bytes(self, n: int):
        with self._own_lock:
            self._own_bytes += n

    # -- test run -------------------------------------------------------------

    def run_test(self, spec: TestSpec, capacity_hint_bps: float | None = None,
                 cross_window_s: float = CROSS_TRAFFIC_WINDOW_S) -> RawTestRecord:
        if not self._busy.acquire(blocking=False):
            raise RuntimeError("engine already running a test; use one engine per test")
        try:
            return self._run_test_locked(spec, capacity_hint_bps, cross_window_s)
        finally:
            self._busy.release()

    def _run_test_locked(self, spec, capacity_hint_bps, cross_window_s):
        flags = set()
        if spec.n_connections < RECOMMENDED_MIN_CONNECTIONS:
            flags.add(FLAG_FEW_CONNECTIONS)

        latency = self.probe_latency(spec.host_port, count=PROBE_COUNT_DEFAULT)

        cross_bps = self.measure_cross_traffic(window=cross_window_s)
        if cross_bps is None:
            flags.add(FLAG_CROSS_UNKNOWN)
        elif cross_bps > cross_traffic_threshold_bps(capacity_hint_bps):
            flags.add(FLAG_CROSS_TRAFFIC)

        control, server_load = self._handshake(spec)
        if server_load is not None:
            flags.add(FLAG_SERVER_LOAD)
        try:
            record = self._transfer(spec, control, flags, latency, cross_bps, server_load)
        finally:
            control.close()
        return record

    def _handshake(self, spec):
        host, port = spec.host_port
        try:
            control = socket.create_connection((host, port), timeout=CONNECT_TIMEOUT_S)
        except OSError as exc:
            raise UnreachableTargetError(f"cannot connect to {host}:{port}: {exc}") from exc
        try:
            control.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            control.settimeout(CONNECT_TIMEOUT_S)
            hello = protocol.pack_hello(spec.direction, int(spec.duration * 1000),
                                        spec.n_connections)
            protocol.send_frame(control, protocol.HELLO, spec.nonce, hello)
            kind, nonce, payload = protocol.recv_frame(control)
        except (OSError, ConnectionError) as exc:
            control.close()
            raise UnreachableTargetError(f"handshake failed: {exc}") from exc
        except protocol.ProtocolError:
            control.close()
            raise TestRefusedError("bad_params")
        if kind == protocol.REFUSE:
            control.close()
            raise TestRefusedError(protocol.REASON_NAMES[protocol.unpack_refuse(payload)])
        if kind != protocol.HELLO_ACK or nonce != spec.nonce:
            # The ack must bind our nonce to exactly one server-side session.
            control.close()
            raise TestRefusedError("bad_params")
        load = protocol.unpack_load(payload)
        return control, (load["active_tests"], load["max_tests"])

    def _transfer(self, spec, control, flags, latency, cross_bps, server_load):
        host, port = spec.host_port
        n = spec.n_connections
        conns: list = [None] * n
        for i in range(n):
            try:
                data = socket.create_connection((host, port), timeout=CONNECT_TIMEOUT_S)
                protocol.send_frame(data, protocol.START_DATA, spec.nonce,
                                    protocol.pack_start_data(i))
                conns[i] = data
            except OSError:
                conns[i] = None  # lost before start; survivors carry the test
        if all(c is None for c in conns):
            raise UnreachableTargetError("no data connection could be opened")

        counters = [0] * n
        failed = [c is None for c in conns]
        stop = threading.Event()
        pool = os.urandom(UPLOAD_POOL_BYTES) if spec.direction == "upload" else b""
        duration_s = spec.duration
        interval_ms = spec.sample_interval

        t0 = time.monotonic()
        deadline = t0 + duration_s

        def move_bytes(index, sock):
            # EOF is the responder ending the transfer cleanly; only a socket
            # error meaningfully before the deadline counts as a lost connection.
            try:
                sock.settimeout(0.2)
                offset = 0
                while not stop.is_set() and time.monotonic() < deadline:
                    if spec.direction == "download":
                        try:
                            chunk = sock.recv(CHUNK_BYTES)
                        except TimeoutError:
                            continue
                        if not chunk:
                            return
                        counters[index] += len(chunk)
                        self._credit_own_bytes(len(chunk))
                    else:
                        piece = pool[offset : offset + CHUNK_BYTES]
                        if len(piece) < CHUNK_BYTES:
                            piece += pool[: CHUNK_BYTES - len(piece)]
                        try:
                            sent = sock.send(piece)
                        except TimeoutError:
                            continue
                        counters[index] += sent
                        self._credit_own_bytes(sent)
                        offset = (offset + sent) % len(pool)
            except OSError:
                if time.monotonic() < deadline - interval_ms / 1000.0:
                    failed[index] = True

        workers = []
        for i, sock in enumerate(conns):
            if sock is None:
                continue
            worker = threading.Thread(target=move_bytes, args=(i, sock), daemon=True)
            workers.append(worker)
            worker.start()

        # One sampler walks nominal tick times on the shared clock; each tick
        # snapshots every counter once so the aggregate is an exact sum.
        ticks = round(duration_s * 1000.0 / interval_ms)
        per_conn_samples = [[(0.0, 0)] for _ in range(n)]
        aggregate_samples = [(0.0, 0)]
        for k in range(1, ticks + 1):
            delay = (t0 + k * interval_ms / 1000.0) - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            snapshot = list(counters)
            t_ms = k * interval_ms
            for i in range(n):
                per_conn_samples[i].append((t_ms, snapshot[i]))
            aggregate_samples.append((t_ms, sum(snapshot)))
        stop.set()

        for worker in workers:
            worker.join(timeout=5.0)
        for sock in conns:
            if sock is not None:
                sock.close()

        server_summary = self._collect_summary(control, spec)

        surviving = sum(1 for f in failed if not f)
        if surviving < n / 2:
            flags.add(FLAG_DEGENERATE)

        per_connection_traces = tuple(
            ThroughputTrace(interval_ms, tuple(samples), source=MEASURED)
            for samples in per_conn_samples
        )
        aggregate_trace = ThroughputTrace(interval_ms, tuple(aggregate_samples),
                                          source=MEASURED)
        return RawTestRecord(
            spec=spec,
            per_connection_traces=per_connection_traces,
            aggregate_trace=aggregate_trace,
            latency=latency,
            cross_traffic_bps=cross_bps,
            flags=frozenset(flags),
            server_summary=server_summary,
            server_load=server_load,
            started_at_monotonic=t0,
        )

    def _collect_summary(self, control, spec):
        try:
            protocol.send_frame(control, protocol.DONE, spec.nonce)
            kind, _nonce, payload = protocol.recv_frame(control)
            if kind == protocol.DONE:
                return tuple(protocol.unpack_done_summary(payload))
        except (OSError, ConnectionError, protocol.ProtocolError):
            pass
        return None  # summary is advisory; losing it never fails the test
