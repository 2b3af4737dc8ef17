import socket
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from mgvo.errors import BadVersion, Oversize, TruncatedFrame, UnknownType
from mgvo.sockets import FrameServer, SocketTransport, parse_address
from mgvo.wire import (
    MAX_PAYLOAD,
    Message,
    MsgType,
    ByteCounters,
    decode_frame,
    encode_frame,
    frame_length,
    read_frame,
    split_frames,
)


def test_heartbeat_golden():
    frame = encode_frame(Message(MsgType.HEARTBEAT, {"node_id": "udine"}))
    assert frame == b'\x15\x00\x00\x00\x02\x01{"node_id":"udine"}'
    assert decode_frame(frame) == Message(MsgType.HEARTBEAT, {"node_id": "udine"})


def test_canonical_encoding():
    a = encode_frame(Message(MsgType.QUERY_REQUEST, {"b": 1, "a": [1, 2]}))
    b = encode_frame(Message(MsgType.QUERY_REQUEST, {"a": [1, 2], "b": 1}))
    assert a == b and b'{"a":[1,2],"b":1}' in a


json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2 ** 53, 2 ** 53) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=12,
)


@given(st.sampled_from(list(MsgType)), st.dictionaries(st.text(max_size=8), json_values, max_size=5))
def test_round_trip(t, body):
    assert decode_frame(encode_frame(Message(t, body))) == Message(t, body)


def test_oversize_declared_before_allocation():
    with pytest.raises(Oversize):
        frame_length(struct.pack("<I", 2 ** 32 - 1))
    with pytest.raises(Oversize):
        decode_frame(struct.pack("<I", MAX_PAYLOAD + 1) + b"\x02\x01{}")


def test_oversize_encode():
    with pytest.raises(Oversize):
        encode_frame(Message(MsgType.IMAGE_CHUNK, {"data": "x" * MAX_PAYLOAD}))


def test_decode_errors():
    with pytest.raises(UnknownType):
        decode_frame(b"\x04\x00\x00\x00\x63\x01{}")
    with pytest.raises(BadVersion):
        decode_frame(b"\x04\x00\x00\x00\x02\x02{}")
    with pytest.raises(TruncatedFrame):
        decode_frame(b"\x10\x00\x00\x00\x02\x01{}")
    with pytest.raises(TruncatedFrame):
        decode_frame(b"\x04\x00")
    with pytest.raises(TruncatedFrame):
        decode_frame(b"\x04\x00\x00\x00\x02\x01[]")
    with pytest.raises(TruncatedFrame):
        decode_frame(b"\x04\x00\x00\x00\x02\x01{}x")


def test_split_frames():
    f1 = encode_frame(Message(MsgType.HEARTBEAT, {"x": 1}))
    f2 = encode_frame(Message(MsgType.REGISTER, {}))
    assert split_frames(f1 + f2) == [f1, f2]


def test_terminal():
    assert Message(MsgType.IMAGE_CHUNK, {"last": False}).terminal is False
    assert Message(MsgType.IMAGE_CHUNK, {"last": True}).terminal
    assert Message(MsgType.QUERY_RESULT, {}).terminal


def test_counters():
    c = ByteCounters()
    c.count(MsgType.HEARTBEAT, 10)
    c.count(MsgType.HEARTBEAT, 5)
    assert c.frames_of(MsgType.HEARTBEAT) == 2 and c.total_bytes() == 15
    assert c.snapshot() == {"HEARTBEAT": {"frames": 2, "payload_bytes": 15}}
    c.reset()
    assert c.total_bytes() == 0


class Echo:
    def handle(self, msg, src):
        return [Message(MsgType.HEARTBEAT, {"echo": msg.body.get("x")})]


@pytest.fixture
def server():
    srv = FrameServer(("127.0.0.1", 0), Echo())
    srv.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def test_unknown_type_gets_error_and_connection_survives(server):
    with socket.create_connection(parse_address(server.address), timeout=5) as sock:
        sock.sendall(b"\x04\x00\x00\x00\x63\x01{}")
        _, reply = read_frame(sock)
        assert reply.msg_type == MsgType.ERROR and reply.body["error"] == "UnknownType"
        sock.sendall(encode_frame(Message(MsgType.HEARTBEAT, {"x": 7, "request_id": "r1"})))
        _, reply = read_frame(sock)
        assert reply.body == {"echo": 7, "reply_to": "r1"}


def test_oversize_gets_error(server):
    with socket.create_connection(parse_address(server.address), timeout=5) as sock:
        sock.sendall(struct.pack("<I", 2 ** 32 - 1))
        _, reply = read_frame(sock)
        assert reply.body["error"] == "Oversize"


def test_transport_call_and_scatter(server):
    t = SocketTransport({"a": server.address, "b": server.address})
    assert t.call("me", "a", MsgType.HEARTBEAT, {"x": 1}, 5)[0].body["echo"] == 1
    out = t.scatter("me", {"a": (MsgType.HEARTBEAT, {"x": 2}), "b": (MsgType.HEARTBEAT, {"x": 3})}, 5)
    assert {k: v[0].body["echo"] for k, v in out.items()} == {"a": 2, "b": 3}
    assert t.counters.frames_of(MsgType.HEARTBEAT) == 3


def test_transport_unreachable():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    t = SocketTransport({"gone": f"127.0.0.1:{port}"})
    out = t.scatter("me", {"gone": (MsgType.HEARTBEAT, {})}, 1)
    assert type(out["gone"]).__name__ == "NodeTimeout"
