"""Frame codec round-trips and malformed-input rejection."""

import io
import socket
import struct
import threading

import pytest

from linerate import protocol


class BufferSock:
    """Minimal recv-only socket stand-in over a byte string."""

    def __init__(self, data: bytes):
        self._buf = io.BytesIO(data)

    def recv(self, n: int) -> bytes:
        return self._buf.read(n)


class TestFrameCodec:
    def test_round_trip_header_fields(self):
        nonce = bytes(range(16))
        raw = protocol.encode_frame(protocol.ECHO, nonce, b"ping")
        kind, got_nonce, payload = protocol.recv_frame(BufferSock(raw))
        assert kind == protocol.ECHO
        assert got_nonce == nonce
        assert payload == b"ping"

    def test_empty_payload_round_trip(self):
        raw = protocol.encode_frame(protocol.DONE, protocol.ZERO_NONCE)
        kind, nonce, payload = protocol.recv_frame(BufferSock(raw))
        assert kind == protocol.DONE
        assert nonce == protocol.ZERO_NONCE
        assert payload == b""

    def test_length_prefix_counts_kind_nonce_payload(self):
        raw = protocol.encode_frame(protocol.ECHO, protocol.ZERO_NONCE, b"abc")
        (length,) = struct.unpack("!I", raw[:4])
        assert length == 1 + 16 + 3
        assert len(raw) == 4 + length

    def test_back_to_back_frames(self):
        raw = protocol.encode_frame(protocol.ECHO, protocol.ZERO_NONCE, b"one")
        raw += protocol.encode_frame(protocol.ECHO_REPLY, protocol.ZERO_NONCE, b"two")
        sock = BufferSock(raw)
        assert protocol.recv_frame(sock)[2] == b"one"
        assert protocol.recv_frame(sock)[2] == b"two"

    def test_bad_nonce_length_rejected(self):
        with pytest.raises(protocol.ProtocolError):
            protocol.encode_frame(protocol.ECHO, b"short")

    def test_unknown_kind_rejected_on_encode(self):
        with pytest.raises(protocol.ProtocolError):
            protocol.encode_frame(99, protocol.ZERO_NONCE)

    def test_unknown_kind_rejected_on_decode(self):
        body = bytes([99]) + protocol.ZERO_NONCE
        raw = struct.pack("!I", len(body)) + body
        with pytest.raises(protocol.ProtocolError):
            protocol.recv_frame(BufferSock(raw))

    def test_truncated_body_rejected(self):
        body = bytes([protocol.HELLO]) + b"\x00" * 3  # shorter than a nonce
        raw = struct.pack("!I", len(body)) + body
        with pytest.raises(protocol.ProtocolError):
            protocol.recv_frame(BufferSock(raw))

    def test_oversize_length_rejected(self):
        raw = struct.pack("!I", protocol.MAX_FRAME_BODY + 1)
        with pytest.raises(protocol.ProtocolError):
            protocol.recv_frame(BufferSock(raw))

    def test_early_close_raises_connection_error(self):
        raw = protocol.encode_frame(protocol.ECHO, protocol.ZERO_NONCE, b"ping")
        with pytest.raises(ConnectionError):
            protocol.recv_frame(BufferSock(raw[:10]))

    def test_send_recv_over_real_socketpair(self):
        left, right = socket.socketpair()
        try:
            nonce = b"\xaa" * 16
            sender = threading.Thread(
                target=protocol.send_frame, args=(left, protocol.ECHO, nonce, b"x" * 4096)
            )
            sender.start()
            kind, got_nonce, payload = protocol.recv_frame(right)
            sender.join()
            assert (kind, got_nonce, payload) == (protocol.ECHO, nonce, b"x" * 4096)
        finally:
            left.close()
            right.close()


class TestPayloadCodecs:
    def test_hello_round_trip(self):
        payload = protocol.pack_hello("upload", 10_000, 4)
        assert len(payload) == 9
        fields = protocol.unpack_hello(payload)
        assert fields == {
            "version": protocol.PROTOCOL_VERSION,
            "direction": "upload",
            "duration_ms": 10_000,
            "n_connections": 4,
        }

    def test_hello_carries_explicit_version(self):
        fields = protocol.unpack_hello(protocol.pack_hello("download", 5_000, 1, version=99))
        assert fields["version"] == 99

    def test_hello_wrong_size_rejected(self):
        with pytest.raises(protocol.ProtocolError):
            protocol.unpack_hello(b"\x00" * 8)

    def test_load_round_trip(self):
        fields = protocol.unpack_load(protocol.pack_load(3, 8))
        assert fields == {"active_tests": 3, "max_tests": 8}

    def test_refuse_round_trip_all_reasons(self):
        for reason in protocol.REASON_NAMES:
            assert protocol.unpack_refuse(protocol.pack_refuse(reason)) == reason

    def test_refuse_unknown_reason_rejected(self):
        with pytest.raises(protocol.ProtocolError):
            protocol.pack_refuse(77)
        with pytest.raises(protocol.ProtocolError):
            protocol.unpack_refuse(b"\x4d")

    def test_start_data_round_trip(self):
        assert protocol.unpack_start_data(protocol.pack_start_data(3)) == 3

    def test_done_summary_round_trip(self):
        entries = [(0, 12_345_678, 10_000), (1, 98_765, 9_998)]
        assert protocol.unpack_done_summary(protocol.pack_done_summary(entries)) == entries

    def test_done_summary_empty(self):
        assert protocol.unpack_done_summary(protocol.pack_done_summary([])) == []

    def test_done_summary_truncated_rejected(self):
        payload = protocol.pack_done_summary([(0, 1, 2)])
        with pytest.raises(protocol.ProtocolError):
            protocol.unpack_done_summary(payload[:-1])

    def test_direction_codes_are_inverse(self):
        for name in ("download", "upload"):
            assert protocol.direction_name(protocol.direction_code(name)) == name
        with pytest.raises(protocol.ProtocolError):
            protocol.direction_code("sideways")
