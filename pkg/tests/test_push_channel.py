import socket
import threading
import time

import pytest

from rmaws import ws
from rmaws.client import Client, SendOptions
from rmaws.envelope import (
    Channel,
    FrameKind,
    close_frame,
    decode_push_frame,
    encode_push_frame,
    make_request_id,
    register_frame,
)
from rmaws.server.handlers import HandlerRegistry, ServiceHandler, make_synthetic

from conftest import TOKEN


class RawPushClient:
    """Frame-level test client speaking the push protocol directly."""

    def __init__(self, server):
        host, port = server.address
        sock = socket.create_connection((host, port), timeout=5.0)
        self.conn = ws.client_handshake(sock, f"{host}:{port}", "/push")
        self.conn.sock.settimeout(5.0)

    def send(self, frame):
        self.conn.send_binary(encode_push_frame(frame))

    def recv(self):
        message = self.conn.recv_message()
        return None if message is None else decode_push_frame(message)

    def close(self):
        self.conn.shutdown()


def frozen_clock(t=1_700_000_000_000):
    return lambda: t


def test_register_acks_not_cached_for_unknown_rid(live_server):
    server = live_server([{"name": "echo"}])
    raw = RawPushClient(server)
    rid = make_request_id("devP", 1, "echo")
    raw.send(register_frame(rid, TOKEN))
    ack = raw.recv()
    assert ack.kind is FrameKind.REGISTER_ACK
    assert ack.meta == "NC"
    raw.close()


def test_register_bad_token_gets_error_frame_then_close(live_server):
    server = live_server([{"name": "echo"}])
    raw = RawPushClient(server)
    rid = make_request_id("devP", 1, "echo")
    raw.send(register_frame(rid, "wrong"))
    ack = raw.recv()
    assert ack.kind is FrameKind.REGISTER_ACK
    assert ack.meta == "UA"
    assert raw.recv() is None  # server closed the connection
    raw.close()


def test_register_before_completion_gets_deliver(live_server):
    server = live_server(registry=HandlerRegistry().add(
        make_synthetic("slow", output_size=64, delay_ms=400)))
    client = Client(*server.address, auth_token=TOKEN, clock=frozen_clock())
    raw = RawPushClient(server)
    rid = make_request_id("client", 1_700_000_000_000, "slow")

    start = threading.Thread(
        target=lambda: client.send("slow", b"p", SendOptions(
            http_timeout_ms=5_000, auth_token=TOKEN)))
    start.start()
    time.sleep(0.1)  # execution is pending now
    raw.send(register_frame(rid, TOKEN))
    ack = raw.recv()
    assert ack.meta == "OK"
    deliver = raw.recv()
    assert deliver.kind is FrameKind.DELIVER
    assert deliver.meta == "OK"
    assert len(deliver.body) == 64
    start.join()
    raw.close()


def test_register_after_completion_delivers_immediately(live_server):
    server = live_server(registry=HandlerRegistry().add(
        make_synthetic("echo")))
    client = Client(*server.address, auth_token=TOKEN, clock=frozen_clock())
    outcome = client.send("echo", b"cached-bytes")
    assert outcome.channel is Channel.HTTP

    raw = RawPushClient(server)
    raw.send(register_frame(outcome.rid.with_trial(2), TOKEN))
    ack = raw.recv()
    assert ack.kind is FrameKind.REGISTER_ACK and ack.meta == "OK"
    deliver = raw.recv()
    assert deliver.kind is FrameKind.DELIVER
    assert deliver.body == b"cached-bytes"
    # Exactly one Deliver frame: nothing further arrives before close.
    raw.send(close_frame())
    assert raw.recv() is None
    raw.close()


def test_double_register_one_ack_one_deliver(live_server):
    server = live_server(registry=HandlerRegistry().add(
        make_synthetic("slow", output_size=16, delay_ms=400)))
    client = Client(*server.address, auth_token=TOKEN, clock=frozen_clock())
    rid = make_request_id("client", 1_700_000_000_000, "slow")
    raw = RawPushClient(server)

    sender = threading.Thread(
        target=lambda: client.send("slow", b"p", SendOptions(
            http_timeout_ms=5_000, auth_token=TOKEN)))
    sender.start()
    time.sleep(0.1)
    raw.send(register_frame(rid, TOKEN))
    raw.send(register_frame(rid, TOKEN))  # duplicate: idempotent
    frames = [raw.recv(), raw.recv()]
    sender.join()
    kinds = [f.kind for f in frames]
    assert kinds == [FrameKind.REGISTER_ACK, FrameKind.DELIVER]
    raw.close()


def test_client_close_deregisters_presence(live_server):
    server = live_server(registry=HandlerRegistry().add(
        make_synthetic("slow", output_size=16, delay_ms=600)))
    client = Client(*server.address, auth_token=TOKEN, clock=frozen_clock())
    rid = make_request_id("client", 1_700_000_000_000, "slow")
    raw = RawPushClient(server)

    sender = threading.Thread(
        target=lambda: client.send("slow", b"p", SendOptions(
            http_timeout_ms=5_000, auth_token=TOKEN)))
    sender.start()
    time.sleep(0.1)
    raw.send(register_frame(rid, TOKEN))
    assert raw.recv().kind is FrameKind.REGISTER_ACK
    assert server.core.presence_route(rid.dedup_key) is not None
    raw.send(close_frame())
    deadline = time.time() + 2
    while server.core.presence_route(rid.dedup_key) is not None and time.time() < deadline:
        time.sleep(0.02)
    assert server.core.presence_route(rid.dedup_key) is None
    sender.join()
    raw.close()


def test_large_body_pushed_byte_exact(live_server):
    server = live_server(registry=HandlerRegistry().add(
        make_synthetic("huge", output_size=2_167_000, delay_ms=300)))
    client = Client(*server.address, auth_token=TOKEN)
    outcome = client.send("huge", b"p", SendOptions(
        http_timeout_ms=100, push_wait_ms=30_000, auth_token=TOKEN))
    assert outcome.channel is Channel.PUSH
    assert len(outcome.body) == 2_167_000
    from rmaws.server.handlers import synthetic_body
    assert outcome.body == synthetic_body("huge", b"p", 2_167_000)


def test_push_after_client_death_leaves_response_cached(live_server):
    server = live_server(registry=HandlerRegistry().add(
        make_synthetic("slow", output_size=32, delay_ms=500)))
    client = Client(*server.address, auth_token=TOKEN, clock=frozen_clock())
    rid = make_request_id("client", 1_700_000_000_000, "slow")
    raw = RawPushClient(server)

    sender = threading.Thread(
        target=lambda: client.send("slow", b"p", SendOptions(
            http_timeout_ms=5_000, auth_token=TOKEN)))
    sender.start()
    time.sleep(0.1)
    raw.send(register_frame(rid, TOKEN))
    assert raw.recv().kind is FrameKind.REGISTER_ACK
    # Kill the socket hard before the execution completes.
    raw.conn.sock.close()
    sender.join()
    record = server.core.record(rid.dedup_key)
    assert record is not None
    assert record.body is not None and len(record.body) == 32


def test_idle_connection_closed_by_server(live_server):
    server = live_server([{"name": "echo"}], push_idle_timeout_ms=300)
    raw = RawPushClient(server)
    start = time.time()
    goodbye = raw.recv()  # server announces the close with a Close frame
    assert goodbye is not None and goodbye.kind is FrameKind.CLOSE
    assert raw.recv() is None  # then drops the socket
    assert time.time() - start < 3.0
    raw.close()


def test_zero_length_body_deliver(live_server):
    server = live_server(registry=HandlerRegistry().add(
        ServiceHandler("empty", lambda p: b"", delay_ms=300)))
    client = Client(*server.address, auth_token=TOKEN)
    outcome = client.send("empty", b"p", SendOptions(
        http_timeout_ms=100, push_wait_ms=10_000, auth_token=TOKEN))
    assert outcome.channel is Channel.PUSH
    assert outcome.body == b""
