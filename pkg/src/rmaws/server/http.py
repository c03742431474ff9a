"""Live threaded server: /services, /direct, /push and /healthz.

Each request runs on its own thread. A request thread that wins the
execution runs the handler itself; duplicate arrivals for the same dedup
key park on the in-flight record and every live exchange writes the
completed response on its own socket. Push deliveries are written by the
finishing thread. Client disconnects are detected with a zero-byte peek
before each write, which is what turns an abandoned exchange into the
push/cache fallback path.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .. import ws
from ..envelope import (
    Channel,
    MalformedEnvelope,
    RequestEnvelope,
    ResponseEnvelope,
    ResponseStatus,
    decode_request,
)
from ..push import PushSession
from .core import HttpRoute, ServerCore, ValidationError
from .handlers import HandlerRegistry
from .store import AppendOnlyFileStore

log = logging.getLogger(__name__)

TOKEN_HEADER = "X-RMAWS-Token"
RID_HEADER = "X-RMAWS-Rid"
CHANNEL_HEADER = "X-RMAWS-Channel"
STATUS_HEADER = "X-RMAWS-Status"

_VALIDATION_HTTP_CODES = {"BadId": 400, "UnknownService": 404, "Unauthorized": 401}
DEFAULT_CACHE_TTL_MS = 24 * 60 * 60 * 1000
WAITER_CAP_S = 600.0


@dataclass
class ServerConfig:
    bind_host: str = "127.0.0.1"
    bind_port: int = 0
    auth_token: str = ""
    cache_ttl_ms: int | None = DEFAULT_CACHE_TTL_MS
    push_idle_timeout_ms: int = 300_000
    store_path: str | None = None
    services: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, raw: dict) -> "ServerConfig":
        cfg = cls()
        if "bind" in raw:
            host, _, port = str(raw["bind"]).rpartition(":")
            cfg.bind_host, cfg.bind_port = host or "127.0.0.1", int(port)
        cfg.auth_token = str(raw.get("auth_token", cfg.auth_token))
        if "cache_ttl_ms" in raw:
            ttl = raw["cache_ttl_ms"]
            cfg.cache_ttl_ms = None if ttl is None else int(ttl)
        cfg.push_idle_timeout_ms = int(raw.get("push_idle_timeout_ms", cfg.push_idle_timeout_ms))
        cfg.store_path = raw.get("store_path")
        cfg.services = list(raw.get("services", []))
        return cfg

    @classmethod
    def load(cls, path: str, env: dict | None = None) -> "ServerConfig":
        """Read the JSON config file, then apply RMAWS_* env overrides."""
        with open(path, "r", encoding="utf-8") as fh:
            cfg = cls.from_dict(json.load(fh))
        env = env if env is not None else os.environ
        if env.get("RMAWS_BIND"):
            host, _, port = env["RMAWS_BIND"].rpartition(":")
            cfg.bind_host, cfg.bind_port = host or "127.0.0.1", int(port)
        if env.get("RMAWS_AUTH_TOKEN") is not None and "RMAWS_AUTH_TOKEN" in env:
            cfg.auth_token = env["RMAWS_AUTH_TOKEN"]
        if env.get("RMAWS_CACHE_TTL_MS"):
            cfg.cache_ttl_ms = int(env["RMAWS_CACHE_TTL_MS"])
        if env.get("RMAWS_PUSH_IDLE_TIMEOUT_MS"):
            cfg.push_idle_timeout_ms = int(env["RMAWS_PUSH_IDLE_TIMEOUT_MS"])
        if env.get("RMAWS_STORE_PATH"):
            cfg.store_path = env["RMAWS_STORE_PATH"]
        return cfg


class LiveExchange:
    """An open HTTP exchange acting as the waiter for its request."""

    def __init__(self, handler: "RmawsRequestHandler", env: RequestEnvelope):
        self.handler = handler
        self.env = env
        self.event = threading.Event()
        self.plan = None

    def complete(self, plan) -> None:
        self.plan = plan
        self.event.set()

    def alive(self) -> bool:
        return _socket_alive(self.handler.connection)

    def respond(self, resp: ResponseEnvelope, http_code: int) -> bool:
        if not self.alive():
            return False
        try:
            handler = self.handler
            handler.send_response(http_code)
            handler.send_header("Content-Type", "application/octet-stream")
            handler.send_header("Content-Length", str(len(resp.body)))
            handler.send_header(RID_HEADER, resp.rid.canonical())
            handler.send_header(CHANNEL_HEADER, resp.channel.value)
            handler.send_header(STATUS_HEADER, resp.status.value)
            handler.end_headers()
            handler.wfile.write(resp.body)
            handler.wfile.flush()
            return True
        except OSError as exc:
            log.debug("response write failed: %s", exc)
            return False


def _socket_alive(sock: socket.socket) -> bool:
    """Peek for EOF without consuming; a closed peer reads as b""."""
    try:
        data = sock.recv(1, socket.MSG_PEEK | socket.MSG_DONTWAIT)
        return bool(data)
    except (BlockingIOError, InterruptedError):
        return True
    except OSError:
        return False


def _http_code_for(resp: ResponseEnvelope, validation: ValidationError | None = None) -> int:
    if resp.status is ResponseStatus.OK:
        return 200
    if resp.status is ResponseStatus.SERVICE_ERROR:
        return 500
    if validation is not None:
        return _VALIDATION_HTTP_CODES.get(validation.reason, 400)
    return 400


class RmawsServer:
    """Composition root for the live server."""

    def __init__(self, config: ServerConfig, registry: HandlerRegistry | None = None,
                 *, clock=None, break_dedup: bool = False):
        self.config = config
        self.registry = registry if registry is not None else HandlerRegistry.from_config(config.services)
        store = AppendOnlyFileStore(config.store_path) if config.store_path else None
        self.core = ServerCore(
            self.registry,
            auth_token=config.auth_token,
            clock=clock,
            store=store,
            cache_ttl_ms=config.cache_ttl_ms,
            break_dedup=break_dedup,
        )
        self._httpd = _Httpd((config.bind_host, config.bind_port), RmawsRequestHandler)
        self._httpd.rmaws = self
        self._thread: threading.Thread | None = None
        self._sessions: set[PushSession] = set()
        self._session_socks: dict[PushSession, socket.socket] = {}
        self._sessions_lock = threading.Lock()
        self._active = 0
        self._active_lock = threading.Lock()
        self._idle = threading.Condition(self._active_lock)
        self._stopping = False

    # -- lifecycle ------------------------------------------------------

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return host, port

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "RmawsServer":
        self._thread = threading.Thread(target=self._httpd.serve_forever,
                                        name="rmaws-accept", daemon=True)
        self._thread.start()
        log.info("serving on %s:%d", *self.address)
        return self

    def stop(self, *, drain_timeout_s: float = 30.0) -> None:
        """Graceful stop: stop accepting, drain in-flight deliveries,
        close push connections, release the socket."""
        self._stopping = True
        self._httpd.shutdown()
        deadline = time.monotonic() + drain_timeout_s
        with self._idle:
            while self._active > 0 and time.monotonic() < deadline:
                self._idle.wait(timeout=max(0.0, deadline - time.monotonic()))
        with self._sessions_lock:
            sessions = list(self._sessions)
        for session in sessions:
            session.send_goodbye()
            sock = self._session_socks.get(session)
            if sock is not None:
                try:
                    sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self._httpd.server_close()

    def _begin_request(self) -> None:
        with self._active_lock:
            self._active += 1

    def _end_request(self) -> None:
        with self._idle:
            self._active -= 1
            if self._active == 0:
                self._idle.notify_all()

    # -- request orchestration -------------------------------------------

    def handle_request(self, env: RequestEnvelope, exchange: LiveExchange, token: str):
        """Full request sequence: validate, dedup, execute or join, deliver.

        Returns (channel | None, ResponseStatus) for logging; None channel
        means the response was parked in the cache for later replay.
        """
        err = self.core.validate(env, token)
        if err is not None:
            resp = err.response_for(env.rid, Channel.HTTP)
            exchange.respond(resp, _http_code_for(resp, err))
            return Channel.HTTP, ResponseStatus.VALIDATION_ERROR

        result = self.core.submit(env, exchange, route=HttpRoute(exchange))
        if result.kind == "replay":
            delivered = exchange.respond(result.response, 200)
            return (Channel.CACHE_REPLAY if delivered else None), result.response.status

        if result.kind == "execute":
            handler = self.registry.get(env.service_name)
            if handler.delay_ms:
                time.sleep(handler.delay_ms / 1000.0)
            try:
                body = handler.run(env.payload)
                plan = self.core.finish(result.ticket, body=body)
            except Exception as exc:
                log.info("handler %s failed: %s", env.service_name, exc)
                plan = self.core.finish(result.ticket,
                                        error_code=f"{type(exc).__name__}: {exc}")
            self._deliver(plan)
        # Both the executor and attached duplicates wait on their own
        # exchange; whoever finished has completed every waiter by now.
        if not exchange.event.wait(timeout=WAITER_CAP_S):
            return None, ResponseStatus.SERVICE_ERROR  # pragma: no cover
        plan = exchange.plan
        resp = plan.response_for(env.rid, Channel.HTTP)
        delivered = exchange.respond(resp, _http_code_for(resp))
        if not delivered:
            self.core.deregister_presence(env.rid.dedup_key, HttpRoute(exchange))
            return None, resp.status
        return Channel.HTTP, resp.status

    def _deliver(self, plan) -> None:
        for waiter in plan.waiters:
            waiter.complete(plan)
        if plan.push is not None:
            resp = plan.response_for(plan.push.rid, Channel.PUSH)
            if plan.push.conn.push_response(resp):
                self.core.emit("push_delivered", key=plan.key, size=len(resp.body))
            else:
                log.info("push write failed for %s; response stays cached", plan.key)

    # -- direct (baseline) route ------------------------------------------

    def run_direct(self, name: str, payload: bytes) -> tuple[int, bytes]:
        handler = self.registry.get(name)
        if handler is None:
            return 404, b"unknown service"
        if handler.delay_ms:
            time.sleep(handler.delay_ms / 1000.0)
        try:
            return 200, handler.run(payload)
        except Exception as exc:
            return 500, f"service error: {type(exc).__name__}: {exc}".encode("utf-8")

    # -- push sessions ------------------------------------------------------

    def attach_session(self, session: PushSession, sock: socket.socket) -> None:
        with self._sessions_lock:
            self._sessions.add(session)
            self._session_socks[session] = sock

    def detach_session(self, session: PushSession) -> None:
        with self._sessions_lock:
            self._sessions.discard(session)
            self._session_socks.pop(session, None)


class _Httpd(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    rmaws: "RmawsServer"


class RmawsRequestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "rmaws/0.1"

    @property
    def rmaws(self) -> RmawsServer:
        return self.server.rmaws

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length", "0"))
        return self.rfile.read(length) if length else b""

    def _plain(self, code: int, body: bytes, extra: dict | None = None) -> None:
        try:
            self.send_response(code)
            self.send_header("Content-Type", "application/octet-stream")
            self.send_header("Content-Length", str(len(body)))
            for name, value in (extra or {}).items():
                self.send_header(name, value)
            self.end_headers()
            self.wfile.write(body)
        except OSError:
            pass

    def do_GET(self):
        if self.path == "/healthz":
            self._plain(200, b"ok")
            return
        if self.path == "/push":
            self._handle_push_upgrade()
            return
        self._plain(404, b"not found")

    def do_POST(self):
        if self.path.startswith("/services/"):
            self._handle_service()
            return
        if self.path.startswith("/direct/"):
            name = self.path[len("/direct/"):]
            code, body = self.rmaws.run_direct(name, self._read_body())
            self._plain(code, body)
            return
        self._plain(404, b"not found")

    def _handle_service(self):
        server = self.rmaws
        server._begin_request()
        try:
            raw = self._read_body()
            try:
                env = decode_request(raw)
            except MalformedEnvelope as exc:
                self._plain(400, str(exc).encode("utf-8"),
                            {STATUS_HEADER: ResponseStatus.VALIDATION_ERROR.value,
                             CHANNEL_HEADER: Channel.HTTP.value})
                return
            name = self.path[len("/services/"):]
            if name != env.service_name:
                self._plain(400, b"path does not match envelope service",
                            {STATUS_HEADER: ResponseStatus.VALIDATION_ERROR.value,
                             CHANNEL_HEADER: Channel.HTTP.value})
                return
            exchange = LiveExchange(self, env)
            token = self.headers.get(TOKEN_HEADER, "")
            server.handle_request(env, exchange, token)
        finally:
            self.close_connection = True
            server._end_request()

    def _handle_push_upgrade(self):
        server = self.rmaws
        try:
            response = ws.server_handshake_response(self.headers)
        except ws.WsError as exc:
            self._plain(400, str(exc).encode("utf-8"))
            return
        try:
            self.connection.sendall(response)
        except OSError:
            return
        conn = ws.WsConnection(self.connection, mask_outgoing=False)
        session = PushSession(server.core, conn.send_binary, conn_id=uuid.uuid4().hex[:8])
        server.attach_session(session, self.connection)
        idle_s = server.config.push_idle_timeout_ms / 1000.0
        self.connection.settimeout(idle_s)
        try:
            while True:
                try:
                    message = conn.recv_message()
                except socket.timeout:
                    log.info("closing idle push connection %s", session.conn_id)
                    session.send_goodbye()
                    break
                except (ws.WsError, OSError):
                    break
                if message is None:
                    break
                if not session.on_message(message):
                    break
        finally:
            session.mark_dead()
            conn.send_close()
            server.detach_session(session)
            self.close_connection = True
