"""Client SDK: identified sends with timeout fallback and stable retries.

``SendMachine`` is the sans-IO state machine behind one logical send: it
builds the request identity once, walks HTTP wait -> push wait -> retry
transitions, and emits effects for a driver to perform. The live driver
(``Client``) interprets effects with blocking sockets; the simulator
interprets the same machine with virtual-clock events, so both exercise
identical protocol behaviour.
"""

from __future__ import annotations

import http.client
import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from . import ws
from .envelope import (
    Channel,
    RequestEnvelope,
    RequestId,
    ResponseEnvelope,
    ResponseStatus,
    FrameKind,
    close_frame,
    decode_push_frame,
    encode_push_frame,
    encode_request,
    make_request_id,
    register_frame,
)

log = logging.getLogger(__name__)

TOKEN_HEADER = "X-RMAWS-Token"
RID_HEADER = "X-RMAWS-Rid"
CHANNEL_HEADER = "X-RMAWS-Channel"
STATUS_HEADER = "X-RMAWS-Status"

DEFAULT_PUSH_WAIT_MS = 30_000


@dataclass(frozen=True)
class SendOptions:
    http_timeout_ms: int = 2_000
    push_wait_ms: int = DEFAULT_PUSH_WAIT_MS
    max_trials: int = 3
    forced: bool = False
    auth_token: str = ""

    def __post_init__(self):
        if self.http_timeout_ms <= 0 or self.push_wait_ms <= 0:
            raise ValueError("timeouts must be positive")
        if not 1 <= self.max_trials <= 99:
            raise ValueError("max_trials must be in 1..99")


@dataclass(frozen=True)
class Outcome:
    status: ResponseStatus
    body: bytes | None
    channel: Channel
    trials_used: int
    rid: RequestId | None

    def __post_init__(self):
        if (self.body is not None) != (self.status is ResponseStatus.OK):
            raise ValueError("body must be present exactly when status is Ok")


class ClientError(Exception):
    """Terminal send failure: Exhausted, Transport or Rejected."""

    def __init__(self, kind: str, detail: str, *, rid: RequestId | None = None,
                 trials_used: int = 0):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail
        self.rid = rid
        self.trials_used = trials_used


def build(
    service: str,
    payload: bytes,
    forced: bool,
    trial: int,
    clock,
    device_id: str,
) -> RequestEnvelope:
    """Construct an identified envelope; the timestamp comes from ``clock``."""
    rid = make_request_id(device_id, clock(), service, trial=trial, forced=forced)
    return RequestEnvelope(rid=rid, is_forced=forced, service_name=rid.service_name.rstrip(),
                           payload=payload)


# -- machine effects -------------------------------------------------------

@dataclass(frozen=True)
class SendHttp:
    env: RequestEnvelope
    timeout_ms: int
    epoch: int


@dataclass(frozen=True)
class AbandonHttp:
    trial: int


@dataclass(frozen=True)
class RegisterPush:
    rid: RequestId
    wait_ms: int
    epoch: int


@dataclass(frozen=True)
class Pause:
    ms: int
    epoch: int


@dataclass(frozen=True)
class ReleasePush:
    rid: RequestId


@dataclass(frozen=True)
class Finished:
    outcome: Outcome


@dataclass(frozen=True)
class Failed:
    error: ClientError


class SendMachine:
    """State machine for one logical send.

    The identity (device, timestamp, service) is fixed at construction;
    retries only increment the trial digits, so every attempt shares one
    dedup key. The first completed delivery wins; later deliveries for the
    same key are dropped.
    """

    WAIT_HTTP = "wait_http"
    WAIT_PUSH = "wait_push"
    PAUSED = "paused"
    DONE = "done"

    def __init__(self, service: str, payload: bytes, opts: SendOptions, device_id: str,
                 now_ms: int):
        self.opts = opts
        self.payload = payload
        self.rid = make_request_id(device_id, now_ms, service, trial=1, forced=opts.forced)
        self.service = self.rid.service_name.rstrip()
        self.state = SendMachine.WAIT_HTTP
        self.epoch = 0
        self.registered = False
        self.result: Outcome | ClientError | None = None

    @property
    def key(self) -> str:
        return self.rid.dedup_key

    def _envelope(self) -> RequestEnvelope:
        return RequestEnvelope(self.rid, self.opts.forced, self.service, self.payload)

    def _send_effects(self) -> list:
        self.state = SendMachine.WAIT_HTTP
        self.epoch += 1
        return [SendHttp(self._envelope(), self.opts.http_timeout_ms, self.epoch)]

    def start(self) -> list:
        return self._send_effects()

    def _finish(self, resp: ResponseEnvelope) -> list:
        self.state = SendMachine.DONE
        effects = []
        if self.registered:
            effects.append(ReleasePush(self.rid))
        if resp.status is ResponseStatus.VALIDATION_ERROR:
            self.result = ClientError("Rejected", resp.body.decode("utf-8", "replace"),
                                      rid=self.rid, trials_used=self.rid.trial)
            effects.append(Failed(self.result))
        else:
            self.result = Outcome(
                status=resp.status,
                body=resp.body if resp.status is ResponseStatus.OK else None,
                channel=resp.channel,
                trials_used=self.rid.trial,
                rid=self.rid,
            )
            effects.append(Finished(self.result))
        return effects

    def _fail(self, kind: str, detail: str) -> list:
        self.state = SendMachine.DONE
        self.result = ClientError(kind, detail, rid=self.rid, trials_used=self.rid.trial)
        effects = []
        if self.registered:
            effects.append(ReleasePush(self.rid))
        effects.append(Failed(self.result))
        return effects

    def _next_trial(self) -> list:
        if self.rid.trial >= self.opts.max_trials:
            return self._fail("Exhausted", f"no response after {self.rid.trial} trials")
        self.rid = self.rid.with_trial(self.rid.trial + 1)
        return self._send_effects()

    def _delivery(self, resp: ResponseEnvelope) -> list:
        if self.state == SendMachine.DONE or resp.rid.dedup_key != self.key:
            log.debug("dropping duplicate/foreign delivery for %s", resp.rid.short())
            return []
        return self._finish(resp)

    def on_http_response(self, resp: ResponseEnvelope) -> list:
        return self._delivery(resp)

    def on_http_timeout(self, epoch: int) -> list:
        if self.state != SendMachine.WAIT_HTTP or epoch != self.epoch:
            return []
        self.state = SendMachine.WAIT_PUSH
        self.epoch += 1
        self.registered = True
        return [
            AbandonHttp(self.rid.trial),
            RegisterPush(self.rid, self.opts.push_wait_ms, self.epoch),
        ]

    def on_http_transport_error(self, refused: bool) -> list:
        """Connection refused is terminal; a reset after sending means the
        response may be lost in flight, which is exactly what the push
        fallback recovers, so it is treated like a timeout."""
        if self.state != SendMachine.WAIT_HTTP:
            return []
        if refused:
            return self._fail("Transport", "connection refused")
        return self.on_http_timeout(self.epoch)

    def on_push_delivered(self, resp: ResponseEnvelope) -> list:
        return self._delivery(resp)

    def on_push_timeout(self, epoch: int) -> list:
        if self.state != SendMachine.WAIT_PUSH or epoch != self.epoch:
            return []
        return self._next_trial()

    def on_push_register_failed(self) -> list:
        """Could not open or register on the push channel: keep the push
        wait as a pacing delay, then retry over HTTP."""
        if self.state != SendMachine.WAIT_PUSH:
            return []
        self.state = SendMachine.PAUSED
        self.epoch += 1
        return [Pause(self.opts.push_wait_ms, self.epoch)]

    def on_push_dead(self) -> list:
        """An established push connection died: retry immediately."""
        if self.state != SendMachine.WAIT_PUSH:
            return []
        return self._next_trial()

    def on_pause_done(self, epoch: int) -> list:
        if self.state != SendMachine.PAUSED or epoch != self.epoch:
            return []
        return self._next_trial()


# -- live driver -----------------------------------------------------------

class _PushSlot:
    def __init__(self):
        self.event = threading.Event()
        self.resp: ResponseEnvelope | None = None
        self.dead = False


class PushClient:
    """Shared push connection: one reader thread dispatches Deliver frames
    to waiting sends by dedup key. Opened lazily on first timeout, reused
    across sends, closed once no registration is outstanding."""

    def __init__(self, host: str, port: int, token: str, *, connect_timeout_s: float = 5.0):
        self.host = host
        self.port = port
        self.token = token
        self.connect_timeout_s = connect_timeout_s
        self._lock = threading.Lock()
        self._conn: ws.WsConnection | None = None
        self._slots: dict[str, _PushSlot] = {}

    def register(self, rid: RequestId) -> _PushSlot | None:
        """Ensure a live connection and a registration for rid's key.

        The Register frame is re-sent even when a local slot already
        exists: an interleaved HTTP retry may have replaced and consumed
        the server-side registration. The server treats a still-standing
        duplicate as idempotent. Returns the wait slot, or None when the
        channel is unavailable."""
        with self._lock:
            if self._conn is None:
                try:
                    sock = socket.create_connection((self.host, self.port),
                                                    timeout=self.connect_timeout_s)
                    sock.settimeout(None)
                    self._conn = ws.client_handshake(sock, f"{self.host}:{self.port}", "/push")
                except (OSError, ws.WsError) as exc:
                    log.debug("push connect failed: %s", exc)
                    return None
                threading.Thread(target=self._reader, args=(self._conn,), daemon=True).start()
            slot = self._slots.get(rid.dedup_key)
            if slot is None:
                slot = _PushSlot()
                self._slots[rid.dedup_key] = slot
            try:
                self._conn.send_binary(encode_push_frame(register_frame(rid, self.token)))
            except ws.WsError as exc:
                log.debug("push register failed: %s", exc)
                self._mark_dead_locked()
                return None
            return slot

    def wait(self, slot: _PushSlot, timeout_ms: int) -> tuple[str, ResponseEnvelope | None]:
        slot.event.wait(timeout_ms / 1000.0)
        if slot.resp is not None:
            return "deliver", slot.resp
        if slot.dead:
            return "dead", None
        return "timeout", None

    def release(self, rid: RequestId) -> None:
        """Drop the registration; close the socket when none are left."""
        with self._lock:
            self._slots.pop(rid.dedup_key, None)
            if not self._slots and self._conn is not None:
                try:
                    self._conn.send_binary(encode_push_frame(close_frame()))
                except ws.WsError:
                    pass
                self._conn.shutdown()
                self._conn = None

    def _mark_dead_locked(self) -> None:
        if self._conn is not None:
            self._conn.shutdown()
            self._conn = None
        for slot in self._slots.values():
            slot.dead = True
            slot.event.set()
        self._slots.clear()

    def _reader(self, conn: ws.WsConnection) -> None:
        while True:
            try:
                message = conn.recv_message()
            except (ws.WsError, OSError):
                message = None
            if message is None:
                with self._lock:
                    if self._conn is conn:
                        self._mark_dead_locked()
                return
            try:
                frame = decode_push_frame(message)
            except Exception as exc:
                log.warning("undecodable push frame: %s", exc)
                continue
            if frame.kind is FrameKind.DELIVER:
                resp = ResponseEnvelope(
                    frame.rid,
                    _status_from_meta(frame.meta),
                    Channel.PUSH,
                    frame.body,
                )
                with self._lock:
                    slot = self._slots.pop(frame.rid.dedup_key, None)
                if slot is None:
                    log.debug("dropping unmatched Deliver for %s", frame.rid.short())
                    continue
                slot.resp = resp
                slot.event.set()
            elif frame.kind is FrameKind.REGISTER_ACK:
                if frame.meta == "UA":
                    log.warning("push registration unauthorized; closing")
                    with self._lock:
                        if self._conn is conn:
                            self._mark_dead_locked()
                    return
                log.debug("register ack %s for %s", frame.meta, frame.rid.short())


def _status_from_meta(meta: str | None) -> ResponseStatus:
    from .envelope import status_from_code

    return status_from_code(meta) if meta else ResponseStatus.OK


class Client:
    """Live SDK over a running server."""

    def __init__(self, host: str, port: int, *, device_id: str = "client",
                 auth_token: str = "", clock=None, defaults: SendOptions | None = None):
        self.host = host
        self.port = port
        self.device_id = device_id
        self.auth_token = auth_token
        self.clock = clock if clock is not None else _wall_ms
        self.defaults = defaults if defaults is not None else SendOptions(auth_token=auth_token)
        self._push = PushClient(host, port, auth_token)

    # -- the send state machine, interpreted with blocking IO ---------

    def send(self, service: str, payload: bytes, opts: SendOptions | None = None) -> Outcome:
        opts = opts if opts is not None else self.defaults
        machine = SendMachine(service, payload, opts, self.device_id, self.clock())
        effects = machine.start()
        while True:
            produced = None
            for eff in effects:
                if isinstance(eff, Finished):
                    return eff.outcome
                if isinstance(eff, Failed):
                    raise eff.error
                if isinstance(eff, ReleasePush):
                    self._push.release(eff.rid)
                elif isinstance(eff, AbandonHttp):
                    log.debug("abandoning HTTP exchange for trial %d", eff.trial)
                elif isinstance(eff, SendHttp):
                    produced = self._drive_http(machine, eff)
                elif isinstance(eff, RegisterPush):
                    produced = self._drive_push(machine, eff)
                elif isinstance(eff, Pause):
                    time.sleep(eff.ms / 1000.0)
                    produced = machine.on_pause_done(eff.epoch)
            if produced is None:
                raise RuntimeError("send machine stalled")  # pragma: no cover
            effects = produced

    def _drive_http(self, machine: SendMachine, eff: SendHttp) -> list:
        kind, resp = self._post_envelope(eff.env, eff.timeout_ms)
        if kind == "response":
            return machine.on_http_response(resp)
        if kind == "timeout":
            return machine.on_http_timeout(eff.epoch)
        return machine.on_http_transport_error(refused=(kind == "refused"))

    def _drive_push(self, machine: SendMachine, eff: RegisterPush) -> list:
        slot = self._push.register(eff.rid)
        if slot is None:
            return machine.on_push_register_failed()
        kind, resp = self._push.wait(slot, eff.wait_ms)
        if kind == "deliver":
            return machine.on_push_delivered(resp)
        if kind == "dead":
            return machine.on_push_dead()
        return machine.on_push_timeout(eff.epoch)

    def _post_envelope(self, env: RequestEnvelope, timeout_ms: int):
        conn = http.client.HTTPConnection(self.host, self.port, timeout=timeout_ms / 1000.0)
        try:
            conn.request(
                "POST",
                f"/services/{env.service_name}",
                body=encode_request(env),
                headers={TOKEN_HEADER: self.auth_token,
                         "Content-Type": "application/octet-stream"},
            )
            raw = conn.getresponse()
            body = raw.read()
            status = raw.headers.get(STATUS_HEADER)
            channel = raw.headers.get(CHANNEL_HEADER)
            if status is None or channel is None:
                return "broken", None
            resp = ResponseEnvelope(env.rid, ResponseStatus(status), Channel(channel), body)
            return "response", resp
        except ConnectionRefusedError:
            return "refused", None
        except (socket.timeout, TimeoutError):
            # Abandon the exchange: closing the socket is what tells the
            # server this client is no longer waiting here.
            return "timeout", None
        except (OSError, http.client.HTTPException) as exc:
            log.debug("http transport error: %s", exc)
            return "broken", None
        finally:
            conn.close()

    def send_direct(self, service: str, payload: bytes, opts: SendOptions | None = None) -> Outcome:
        """Baseline path: raw payload, no envelope, no dedup, no fallback."""
        opts = opts if opts is not None else self.defaults
        conn = http.client.HTTPConnection(self.host, self.port,
                                          timeout=opts.http_timeout_ms / 1000.0)
        try:
            conn.request("POST", f"/direct/{service}", body=payload,
                         headers={"Content-Type": "application/octet-stream"})
            raw = conn.getresponse()
            body = raw.read()
            if raw.status != 200:
                raise ClientError("Transport", f"direct call failed: HTTP {raw.status}")
            return Outcome(status=ResponseStatus.OK, body=body, channel=Channel.HTTP,
                           trials_used=1, rid=None)
        except ClientError:
            raise
        except (socket.timeout, TimeoutError) as exc:
            raise ClientError("Transport", "direct call timed out") from exc
        except OSError as exc:
            raise ClientError("Transport", f"direct call failed: {exc}") from exc
        finally:
            conn.close()


def _wall_ms() -> int:
    return int(time.time() * 1000)
