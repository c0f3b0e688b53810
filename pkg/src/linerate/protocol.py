"""Length-prefixed binary control framing shared by the engine and responder.

Frame layout on the wire:

    [4 bytes - big-endian length of everything after this field]
    [1 byte  - message kind]
    [16 bytes - test nonce]
    [N bytes - kind-specific payload]

Control connections speak frames for their whole lifetime.  Data connections
send a single START_DATA frame to bind themselves to a session, then carry a
raw byte stream with no further framing.
"""

import struct

PROTOCOL_VERSION = 1

NONCE_LEN = 16
LENGTH_PREFIX = struct.Struct("!I")
MAX_FRAME_BODY = 1 << 20  # control frames are tiny; anything near this is garbage

# Message kinds.
HELLO = 1
HELLO_ACK = 2
REFUSE = 3
ECHO = 4
ECHO_REPLY = 5
START_DATA = 6
DONE = 7
LOAD_REPORT = 8

KIND_NAMES = {
    HELLO: "hello",
    HELLO_ACK: "hello_ack",
    REFUSE: "refuse",
    ECHO: "echo",
    ECHO_REPLY: "echo_reply",
    START_DATA: "start_data",
    DONE: "done",
    LOAD_REPORT: "load_report",
}

# Refusal reason codes carried in a REFUSE payload.
REASON_VERSION_MISMATCH = 1
REASON_AT_CAPACITY = 2
REASON_BAD_PARAMS = 3

REASON_NAMES = {
    REASON_VERSION_MISMATCH: "version_mismatch",
    REASON_AT_CAPACITY: "at_capacity",
    REASON_BAD_PARAMS: "bad_params",
}

# Direction codes used in the HELLO payload.
DIR_DOWNLOAD = 0
DIR_UPLOAD = 1

_HELLO_PAYLOAD = struct.Struct("!HBIH")  # version, direction, duration_ms, n_connections
_LOAD_PAYLOAD = struct.Struct("!HH")  # active_tests, max_tests
_START_DATA_PAYLOAD = struct.Struct("!H")  # connection index
_DONE_HEADER = struct.Struct("!H")  # number of per-connection entries
_DONE_ENTRY = struct.Struct("!HQI")  # connection index, bytes moved, duration_ms

ZERO_NONCE = bytes(NONCE_LEN)


class ProtocolError(Exception):
    """Malformed or out-of-contract frame."""


def direction_code(direction: str) -> int:
    if direction == "download":
        return DIR_DOWNLOAD
    if direction == "upload":
        return DIR_UPLOAD
    raise ProtocolError(f"unknown direction {direction!r}")


def direction_name(code: int) -> str:
    if code == DIR_DOWNLOAD:
        return "download"
    if code == DIR_UPLOAD:
        return "upload"
    raise ProtocolError(f"unknown direction code {code}")


def encode_frame(kind: int, nonce: bytes, payload: bytes = b"") -> bytes:
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown frame kind {kind}")
    if len(nonce) != NONCE_LEN:
        raise ProtocolError(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")
    body = bytes([kind]) + nonce + payload
    if len(body) > MAX_FRAME_BODY:
        raise ProtocolError(f"frame body too large: {len(body)}")
    return LENGTH_PREFIX.pack(len(body)) + body


def recv_exact(sock, n: int) -> bytes:
    """Read exactly n bytes or raise ConnectionError on early close.

    A socket timeout propagates only when no bytes have been consumed yet, so
    callers polling with a timeout never desynchronize the frame stream.
    """
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except TimeoutError:
            if buf:
                continue
            raise
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock) -> tuple[int, bytes, bytes]:
    """Return (kind, nonce, payload) for the next frame on sock."""
    (length,) = LENGTH_PREFIX.unpack(recv_exact(sock, LENGTH_PREFIX.size))
    if length < 1 + NONCE_LEN:
        raise ProtocolError(f"frame body too short: {length}")
    if length > MAX_FRAME_BODY:
        raise ProtocolError(f"frame body too large: {length}")
    body = recv_exact(sock, length)
    kind = body[0]
    if kind not in KIND_NAMES:
        raise ProtocolError(f"unknown frame kind {kind}")
    return kind, body[1 : 1 + NONCE_LEN], body[1 + NONCE_LEN :]


def send_frame(sock, kind: int, nonce: bytes, payload: bytes = b"") -> None:
    sock.sendall(encode_frame(kind, nonce, payload))


def pack_hello(direction: str, duration_ms: int, n_connections: int,
               version: int = PROTOCOL_VERSION) -> bytes:
    return _HELLO_PAYLOAD.pack(version, direction_code(direction), duration_ms, n_connections)


def unpack_hello(payload: bytes) -> dict:
    if len(payload) != _HELLO_PAYLOAD.size:
        raise ProtocolError(f"hello payload must be {_HELLO_PAYLOAD.size} bytes")
    version, dir_code, duration_ms, n_connections = _HELLO_PAYLOAD.unpack(payload)
    return {
        "version": version,
        "direction": direction_name(dir_code),
        "duration_ms": duration_ms,
        "n_connections": n_connections,
    }


def pack_load(active_tests: int, max_tests: int) -> bytes:
    return _LOAD_PAYLOAD.pack(active_tests, max_tests)


def unpack_load(payload: bytes) -> dict:
    if len(payload) != _LOAD_PAYLOAD.size:
        raise ProtocolError(f"load payload must be {_LOAD_PAYLOAD.size} bytes")
    active_tests, max_tests = _LOAD_PAYLOAD.unpack(payload)
    return {"active_tests": active_tests, "max_tests": max_tests}


def pack_refuse(reason: int) -> bytes:
    if reason not in REASON_NAMES:
        raise ProtocolError(f"unknown refusal reason {reason}")
    return bytes([reason])


def unpack_refuse(payload: bytes) -> int:
    if len(payload) != 1 or payload[0] not in REASON_NAMES:
        raise ProtocolError("malformed refusal payload")
    return payload[0]


def pack_start_data(connection_index: int) -> bytes:
    return _START_DATA_PAYLOAD.pack(connection_index)


def unpack_start_data(payload: bytes) -> int:
    if len(payload) != _START_DATA_PAYLOAD.size:
        raise ProtocolError("malformed start_data payload")
    return _START_DATA_PAYLOAD.unpack(payload)[0]


def pack_done_summary(entries: list[tuple[int, int, int]]) -> bytes:
    """entries: (connection_index, bytes_moved, duration_ms) per data connection."""
    out = [_DONE_HEADER.pack(len(entries))]
    for index, nbytes, duration_ms in entries:
        out.append(_DONE_ENTRY.pack(index, nbytes, duration_ms))
    return b"".join(out)


def unpack_done_summary(payload: bytes) -> list[tuple[int, int, int]]:
    if len(payload) < _DONE_HEADER.size:
        raise ProtocolError("malformed done payload")
    (count,) = _DONE_HEADER.unpack_from(payload, 0)
    expected = _DONE_HEADER.size + count * _DONE_ENTRY.size
    if len(payload) != expected:
        raise ProtocolError(f"done payload must be {expected} bytes for {count} entries")
    entries = []
    for i in range(count):
        offset = _DONE_HEADER.size + i * _DONE_ENTRY.size
        entries.append(_DONE_ENTRY.unpack_from(payload, offset))
    return entries
