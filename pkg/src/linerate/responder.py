"""Measurement responder: the server side of a speed test.

Accepts control handshakes, answers latency echoes, streams or drains bulk
test traffic, and enforces an explicit admission limit so an overloaded
server refuses tests instead of silently skewing them.  Every accepted test
gets a session keyed by the client's nonce; data connections bind to a
session by presenting that nonce in a single start_data frame, then carry a
raw byte stream.

Echo replies never queue behind bulk data because control and data travel on
separate connections.
"""

import argparse
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field

from . import protocol, units

log = logging.getLogger(__name__)

DEFAULT_LISTEN = "0.0.0.0:7777"
DEFAULT_MAX_TESTS = 8
# Admission sizing when only an access-rate hint is given: budget one slot
# per 1 Gbps so concurrent tests cannot outrun the server's own link.
PER_TEST_PEAK_BPS = 1_000_000_000
SESSION_GRACE_S = 5.0
DATA_POOL_BYTES = 4 * 1024 * 1024
CHUNK_BYTES = 64 * 1024
MAX_CONNECTIONS_PER_TEST = 64
_POLL_S = 0.5


@dataclass
class SessionState:
    """One accepted test: identity, admission bookkeeping, transfer tallies.

    deadline is the test end; reaping waits a further SESSION_GRACE_S so the
    client can still collect its summary.
    """

    nonce: bytes
    direction: str
    duration_ms: int
    expected_connections: int
    deadline: float
    attached_connections: int = 0
    transfers: list = field(default_factory=list)  # (index, bytes, duration_ms)
    cond: threading.Condition = field(default_factory=threading.Condition, repr=False)
    _pool: bytes = field(default=b"", repr=False)

    def pool(self) -> bytes:
        # Seeded from the nonce: deterministic per session, uncompressible.
        if not self._pool:
            seed = int.from_bytes(self.nonce, "big")
            self._pool = random.Random(seed).randbytes(DATA_POOL_BYTES)
        return self._pool


class Responder:
    """Threaded TCP server speaking the framed control protocol."""

    def __init__(self, host="127.0.0.1", port=0, max_tests=None, capacity_hint_bps=None):
        if max_tests is None:
            if capacity_hint_bps:
                max_tests = max(1, int(capacity_hint_bps // PER_TEST_PEAK_BPS))
            else:
                max_tests = DEFAULT_MAX_TESTS
        if max_tests < 1:
            raise ValueError("max_tests must be at least 1")
        self.max_tests = max_tests
        self._host = host
        self._port = port
        self._lock = threading.Lock()
        self._sessions: dict[bytes, SessionState] = {}
        self._listener = None
        self._threads: list[threading.Thread] = []
        self._conns: set = set()
        self._running = False

    # -- lifecycle ---------------------------------------------------------

    def start(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self._host, self._port))
        listener.listen(128)
        listener.settimeout(_POLL_S)  # a blocked accept() would outlive stop()
        self._listener = listener
        self._running = True
        accept = threading.Thread(target=self._accept_loop, daemon=True)
        accept.start()
        self._threads.append(accept)
        log.info("responder listening on %s:%d, max_tests=%d", *self.address, self.max_tests)
        return self

    def stop(self):
        self._running = False
        if self._listener is not None:
            self._listener.close()
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.close()
            except OSError:
                pass
        for thread in list(self._threads):
            thread.join(timeout=5.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._listener.getsockname()[:2]
        return host, port

    def active_tests(self) -> int:
        with self._lock:
            self._reap_expired_locked()
            return len(self._sessions)

    # -- connection handling -----------------------------------------------

    def _accept_loop(self):
        while self._running:
            try:
                conn, _peer = self._listener.accept()
            except TimeoutError:
                continue
            except OSError:
                break
            with self._lock:
                self._conns.add(conn)
            thread = threading.Thread(target=self._handle_connection, args=(conn,), daemon=True)
            self._threads.append(thread)
            thread.start()

    def _handle_connection(self, conn):
        session = None
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn.settimeout(_POLL_S)
            while True:
                try:
                    kind, nonce, payload = protocol.recv_frame(conn)
                except TimeoutError:
                    if not self._running:
                        break
                    continue
                if kind == protocol.ECHO:
                    protocol.send_frame(conn, protocol.ECHO_REPLY, nonce, payload)
                elif kind == protocol.LOAD_REPORT:
                    load = protocol.pack_load(self.active_tests(), self.max_tests)
                    protocol.send_frame(conn, protocol.LOAD_REPORT, nonce, load)
                elif kind == protocol.HELLO:
                    created = self._handle_hello(conn, nonce, payload)
                    session = created or session
                elif kind == protocol.START_DATA:
                    self._serve_data(conn, nonce, payload)
                    return
                elif kind == protocol.DONE and session is not None:
                    # Data connections may still be flushing their tallies;
                    # give them a moment so the summary is complete.
                    with session.cond:
                        session.cond.wait_for(
                            lambda: len(session.transfers) >= session.attached_connections,
                            timeout=2.0,
                        )
                        entries = sorted(session.transfers)
                    summary = protocol.pack_done_summary(entries)
                    protocol.send_frame(conn, protocol.DONE, session.nonce, summary)
                else:
                    reason = protocol.pack_refuse(protocol.REASON_BAD_PARAMS)
                    protocol.send_frame(conn, protocol.REFUSE, nonce, reason)
        except protocol.ProtocolError:
            self._refuse_quietly(conn, protocol.ZERO_NONCE, protocol.REASON_BAD_PARAMS)
        except (ConnectionError, OSError):
            pass
        finally:
            with self._lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass
            if session is not None:
                self._end_session(session)

    def _refuse_quietly(self, conn, nonce, reason):
        try:
            protocol.send_frame(conn, protocol.REFUSE, nonce, protocol.pack_refuse(reason))
        except OSError:
            pass

    # -- control operations --------------------------------------------------

    def _handle_hello(self, conn, nonce, payload):
        """Admit or refuse one test; on admission return its SessionState."""
        try:
            fields = protocol.unpack_hello(payload)
        except protocol.ProtocolError:
            self._refuse_quietly(conn, nonce, protocol.REASON_BAD_PARAMS)
            return None
        if fields["version"] != protocol.PROTOCOL_VERSION:
            self._refuse_quietly(conn, nonce, protocol.REASON_VERSION_MISMATCH)
            return None
        if fields["duration_ms"] <= 0 or not (
            1 <= fields["n_connections"] <= MAX_CONNECTIONS_PER_TEST
        ):
            self._refuse_quietly(conn, nonce, protocol.REASON_BAD_PARAMS)
            return None

        # Admission is atomic: reap, check, insert under one lock.
        session = None
        refuse_reason = None
        with self._lock:
            self._reap_expired_locked()
            if len(self._sessions) >= self.max_tests:
                refuse_reason = protocol.REASON_AT_CAPACITY
            elif nonce in self._sessions:
                refuse_reason = protocol.REASON_BAD_PARAMS
            else:
                session = SessionState(
                    nonce=nonce,
                    direction=fields["direction"],
                    duration_ms=fields["duration_ms"],
                    expected_connections=fields["n_connections"],
                    deadline=time.monotonic() + fields["duration_ms"] / 1000.0,
                )
                self._sessions[nonce] = session
            active = len(self._sessions)

        if session is None:
            self._refuse_quietly(conn, nonce, refuse_reason)
            return None
        load = protocol.pack_load(active, self.max_tests)
        protocol.send_frame(conn, protocol.HELLO_ACK, nonce, load)
        log.info("session %s admitted: %s, %d connections, %d ms",
                 nonce.hex()[:8], session.direction, session.expected_connections,
                 session.duration_ms)
        return session

    def _end_session(self, session):
        with self._lock:
            self._sessions.pop(session.nonce, None)
        log.info("session %s ended", session.nonce.hex()[:8])

    def _reap_expired_locked(self):
        now = time.monotonic()
        expired = [n for n, s in self._sessions.items()
                   if s.deadline + SESSION_GRACE_S < now]
        for nonce in expired:
            del self._sessions[nonce]

    # -- data plane ----------------------------------------------------------

    def _serve_data(self, conn, nonce, payload):
        try:
            index = protocol.unpack_start_data(payload)
        except protocol.ProtocolError:
            self._refuse_quietly(conn, nonce, protocol.REASON_BAD_PARAMS)
            return
        with self._lock:
            session = self._sessions.get(nonce)
            if session is not None and session.deadline < time.monotonic():
                session = None
        if session is None:
            # Unknown or expired nonce: refuse and close, touch nothing.
            self._refuse_quietly(conn, nonce, protocol.REASON_BAD_PARAMS)
            return
        with session.cond:
            if session.attached_connections >= session.expected_connections:
                over = True
            else:
                over = False
                session.attached_connections += 1
        if over:
            self._refuse_quietly(conn, nonce, protocol.REASON_BAD_PARAMS)
            return

        started = time.monotonic()
        if session.direction == "download":
            moved = self._stream_to(conn, session)
        else:
            moved = self._drain_from(conn, session)
        duration_ms = int((time.monotonic() - started) * 1000)
        with session.cond:
            session.transfers.append((index, moved, duration_ms))
            session.cond.notify_all()

    def _stream_to(self, conn, session) -> int:
        """Serve pseudo-random bytes until the session deadline; return count."""
        pool = session.pool()
        sent = 0
        offset = 0
        conn.settimeout(1.0)
        while self._running and time.monotonic() < session.deadline:
            chunk = pool[offset : offset + CHUNK_BYTES]
            if len(chunk) < CHUNK_BYTES:
                chunk += pool[: CHUNK_BYTES - len(chunk)]
            try:
                n = conn.send(chunk)
            except TimeoutError:
                continue
            except OSError:
                break
            sent += n
            offset = (offset + n) % len(pool)
        return sent

    def _drain_from(self, conn, session) -> int:
        """Count uploaded bytes until peer close or deadline; return count."""
        got = 0
        conn.settimeout(_POLL_S)
        while self._running and time.monotonic() < session.deadline:
            try:
                chunk = conn.recv(CHUNK_BYTES)
            except TimeoutError:
                continue
            except OSError:
                break
            if not chunk:
                break
            got += len(chunk)
        return got


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="linerate-responder",
        description="Measurement server: answers latency echoes and serves bulk test traffic.",
    )
    parser.add_argument("--listen", default=DEFAULT_LISTEN, metavar="ADDR:PORT",
                        help=f"bind address (default {DEFAULT_LISTEN})")
    parser.add_argument("--max-tests", type=int, default=None,
                        help="concurrent test sessions to admit")
    parser.add_argument("--capacity-hint", default=None, metavar="RATE",
                        help="server access rate, e.g. 1gbps; sizes the admission "
                             "limit when --max-tests is not given")
    parser.add_argument("--verbose", action="store_true", help="log session lifecycle")
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        host, _, port_text = args.listen.rpartition(":")
        port = int(port_text)
        if not host:
            raise ValueError("missing address")
        hint = units.parse_rate(args.capacity_hint) if args.capacity_hint else None
    except ValueError as exc:
        parser.error(str(exc))

    responder = Responder(host, port, max_tests=args.max_tests, capacity_hint_bps=hint)
    responder.start()
    print(f"listening on {responder.address[0]}:{responder.address[1]} "
          f"(max {responder.max_tests} concurrent tests)")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        responder.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
