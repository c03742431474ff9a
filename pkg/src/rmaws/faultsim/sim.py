"""Virtual-clock simulation of the full protocol stack.

One single-threaded event loop drives real protocol components: the
server core, the server-side push sessions, and the client send machines
are the same classes the live stack uses; only transports and timers are
virtual. Requests travel as real encoded bytes through the real codecs,
so wire accounting and body transparency are checked end to end.

Everything is deterministic for a given (scenario, seed): time advances
only through the event queue and no unordered collection feeds the trace.
"""

from __future__ import annotations

import heapq

from ..client import (
    AbandonHttp,
    Failed,
    Finished,
    Pause,
    RegisterPush,
    ReleasePush,
    SendHttp,
    SendMachine,
    SendOptions,
)
from ..envelope import (
    Channel,
    FrameKind,
    ResponseEnvelope,
    close_frame,
    decode_push_frame,
    decode_request,
    encode_push_frame,
    encode_request,
    register_frame,
    status_from_code,
)
from ..push import ConnState, PushSession
from ..server.core import HttpRoute, PushRoute, RecordState, ServerCore
from ..server.handlers import HandlerRegistry, make_synthetic, synthetic_body
from .scenario import ScenarioSpec
from .trace import Trace, TraceRecorder, body_digest


class SimExchange:
    """Server-side view of one in-flight HTTP request/response pair."""

    def __init__(self, world: "SimWorld", send: "SimSend", env):
        self.world = world
        self.send = send
        self.env = env
        self.trial = env.rid.trial
        self.alive = True

    def complete(self, plan) -> None:
        resp = plan.response_for(self.env.rid, Channel.HTTP)
        self.world._send_http_response(self, resp)


class SimPushConn:
    """One client<->server push connection over the in-process pipe."""

    def __init__(self, conn_id: str, client: "SimClient"):
        self.id = conn_id
        self.client = client
        self.session: PushSession | None = None
        self.slots: dict[str, "SimSend"] = {}
        self.alive = True
        self.client_closed = False

    def usable(self) -> bool:
        return self.alive and not self.client_closed


class SimClient:
    def __init__(self, name: str):
        self.name = name
        self.online = True
        self.conn: SimPushConn | None = None
        self.conn_counter = 0


class SimSend:
    def __init__(self, index: int, spec, client: SimClient):
        self.index = index
        self.spec = spec
        self.client = client
        self.machine: SendMachine | None = None
        self.current_exchange: SimExchange | None = None
        self.done = False
        self.outcome = None
        self.error = None


class SimWorld:
    def __init__(self, scenario: ScenarioSpec, seed: int = 0, *, break_dedup: bool = False):
        scenario.validate()
        self.scenario = scenario
        self.seed = seed
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.trace = TraceRecorder(lambda: self.now)

        registry = HandlerRegistry()
        self.profiles = {}
        for svc in scenario.services:
            registry.add(make_synthetic(svc.name, output_size=svc.output_size,
                                        delay_ms=svc.delay_ms, fail_times=svc.fail_times))
            self.profiles[svc.name] = svc
        self.core = ServerCore(
            registry,
            auth_token=scenario.auth_token,
            clock=lambda: self.now,
            events=self._core_event,
            break_dedup=break_dedup,
        )
        self.lat_req = int(scenario.latency["request_ms"])
        self.lat_resp = int(scenario.latency["response_ms"])
        self.lat_push = int(scenario.latency["push_ms"])

        self.clients: dict[str, SimClient] = {}
        self.sends: list[SimSend] = []
        for index, spec in enumerate(scenario.sends):
            client = self.clients.get(spec.client)
            if client is None:
                client = SimClient(spec.client)
                self.clients[spec.client] = client
            self.sends.append(SimSend(index, spec, client))

        self.drop_faults = [f for f in scenario.faults
                            if f.kind in ("drop_request", "drop_http_response")]
        self.timed_faults = [f for f in scenario.faults
                             if f.kind in ("client_offline", "client_online", "kill_push_conn")]

        self.wire = {"requests_bytes": 0, "request_count": 0,
                     "responses_bytes": 0, "push_bytes": 0}
        self.request_sizes: list[list[int]] = []
        self.expected_bodies: dict[str, str] = {}
        self.forced_keys: set[str] = set()
        self.failed_keys: set[str] = set()

    # -- plumbing ---------------------------------------------------------

    def _core_event(self, kind: str, fields: dict) -> None:
        if kind == "record_failed":
            self.failed_keys.add(fields.get("key", ""))
        self.trace.emit(f"server_{kind}", **fields)

    def schedule(self, delay_ms: int, fn) -> None:
        heapq.heappush(self._heap, (self.now + max(0, int(delay_ms)), self._seq, fn))
        self._seq += 1

    def _dropped(self, kind: str, send_index: int, trial: int) -> bool:
        return any(f.kind == kind and f.matches_attempt(send_index, trial)
                   for f in self.drop_faults)

    # -- run ---------------------------------------------------------------

    def run(self) -> Trace:
        for send in self.sends:
            self.schedule(send.spec.t, lambda s=send: self._start_send(s))
        for fault in self.timed_faults:
            self.schedule(fault.t, lambda f=fault: self._apply_fault(f))

        steps = 0
        while self._heap and steps < 1_000_000:
            t, _, fn = heapq.heappop(self._heap)
            if t > self.scenario.end_time_ms:
                break
            self.now = t
            fn()
            steps += 1
        return self._assemble()

    # -- client side ---------------------------------------------------------

    def _opts(self, spec) -> SendOptions:
        return SendOptions(
            http_timeout_ms=spec.http_timeout_ms,
            push_wait_ms=spec.push_wait_ms,
            max_trials=spec.max_trials,
            forced=spec.forced,
            auth_token=self.scenario.auth_token,
        )

    def _start_send(self, send: SimSend) -> None:
        spec = send.spec
        device = spec.device_id if spec.device_id is not None else spec.client
        payload = spec.payload(send.index)
        send.machine = SendMachine(spec.service, payload, self._opts(spec), device, self.now)
        key = send.machine.key
        if spec.forced:
            self.forced_keys.add(key)
        if key not in self.expected_bodies:
            profile = self.profiles[spec.service]
            if profile.output_size is None:
                reference = payload
            else:
                reference = synthetic_body(spec.service, payload, profile.output_size)
            self.expected_bodies[key] = body_digest(reference)
        self.trace.emit("send_start", send=send.index, key=key,
                        rid=send.machine.rid.canonical(), forced=spec.forced)
        self._interpret(send, send.machine.start())

    def _interpret(self, send: SimSend, effects: list) -> None:
        for eff in effects:
            if isinstance(eff, SendHttp):
                self._post(send, eff)
            elif isinstance(eff, AbandonHttp):
                self._abandon(send)
            elif isinstance(eff, RegisterPush):
                self._register_push(send, eff)
            elif isinstance(eff, Pause):
                self.trace.emit("pause", send=send.index, ms=eff.ms)
                self.schedule(eff.ms, lambda s=send, e=eff: self._interpret(
                    s, s.machine.on_pause_done(e.epoch)))
            elif isinstance(eff, ReleasePush):
                self._release_push(send, eff)
            elif isinstance(eff, Finished):
                send.done = True
                send.outcome = eff.outcome
                self.trace.emit("send_done", send=send.index,
                                status=eff.outcome.status.value,
                                channel=eff.outcome.channel.value,
                                trials=eff.outcome.trials_used,
                                body_len=len(eff.outcome.body or b""))
            elif isinstance(eff, Failed):
                send.done = True
                send.error = eff.error
                self.trace.emit("send_failed", send=send.index, error=eff.error.kind,
                                detail=eff.error.detail, trials=eff.error.trials_used)

    def _post(self, send: SimSend, eff: SendHttp) -> None:
        data = encode_request(eff.env)
        self.wire["requests_bytes"] += len(data)
        self.wire["request_count"] += 1
        self.request_sizes.append([len(data), len(eff.env.payload)])
        trial = eff.env.rid.trial
        self.trace.emit("http_post", send=send.index, trial=trial, bytes=len(data),
                        payload_len=len(eff.env.payload), key=eff.env.rid.dedup_key)
        exchange = SimExchange(self, send, eff.env)
        send.current_exchange = exchange
        self.schedule(eff.timeout_ms, lambda s=send, e=eff: self._http_timer(s, e.epoch))
        if not send.client.online:
            self.trace.emit("request_lost_offline", send=send.index, trial=trial)
            return
        if self._dropped("drop_request", send.index, trial):
            self.trace.emit("fault_drop_request", send=send.index, trial=trial)
            return
        self.schedule(self.lat_req, lambda: self._server_receive(send, exchange, data))

    def _http_timer(self, send: SimSend, epoch: int) -> None:
        effects = send.machine.on_http_timeout(epoch)
        if effects:
            self.trace.emit("http_timeout", send=send.index, trial=send.machine.rid.trial)
            self._interpret(send, effects)

    def _abandon(self, send: SimSend) -> None:
        exchange = send.current_exchange
        if exchange is None or not exchange.alive:
            return
        exchange.alive = False
        self.trace.emit("http_abandon", send=send.index, trial=exchange.trial)
        key = exchange.env.rid.dedup_key
        self.schedule(self.lat_req, lambda: self.core.deregister_presence(
            key, HttpRoute(exchange)))

    # -- server side --------------------------------------------------------

    def _server_receive(self, send: SimSend, exchange: SimExchange, data: bytes) -> None:
        env = decode_request(data)
        self.trace.emit("server_receive", send=send.index, trial=env.rid.trial,
                        key=env.rid.dedup_key)
        err = self.core.validate(env, self.scenario.auth_token)
        if err is not None:
            self.trace.emit("validation_failed", send=send.index, reason=err.reason)
            self._send_http_response(exchange, err.response_for(env.rid, Channel.HTTP))
            return
        result = self.core.submit(env, exchange, route=HttpRoute(exchange))
        if result.kind == "replay":
            self._send_http_response(exchange, result.response)
        elif result.kind == "execute":
            profile = self.profiles[env.service_name]
            self.schedule(profile.delay_ms,
                          lambda t=result.ticket: self._complete_execution(t))

    def _complete_execution(self, ticket) -> None:
        handler = self.core.handlers.get(ticket.env.service_name)
        try:
            body = handler.run(ticket.env.payload)
            plan = self.core.finish(ticket, body=body)
        except Exception as exc:
            plan = self.core.finish(ticket, error_code=f"{type(exc).__name__}: {exc}")
        for waiter in plan.waiters:
            waiter.complete(plan)
        if plan.push is not None:
            resp = plan.response_for(plan.push.rid, Channel.PUSH)
            if not plan.push.conn.push_response(resp):
                self.trace.emit("push_write_failed", key=plan.key)

    def _send_http_response(self, exchange: SimExchange, resp: ResponseEnvelope) -> None:
        send = exchange.send
        if not exchange.alive:
            self.trace.emit("http_write_dead", send=send.index, trial=exchange.trial)
            self.core.deregister_presence(exchange.env.rid.dedup_key, HttpRoute(exchange))
            return
        self.wire["responses_bytes"] += len(resp.body)
        self.trace.emit("http_write", send=send.index, trial=exchange.trial,
                        status=resp.status.value, channel=resp.channel.value,
                        bytes=len(resp.body))
        if self._dropped("drop_http_response", send.index, exchange.trial):
            self.trace.emit("fault_drop_http_response", send=send.index,
                            trial=exchange.trial)
            return
        self.schedule(self.lat_resp, lambda: self._client_receive_http(exchange, resp))

    def _client_receive_http(self, exchange: SimExchange, resp: ResponseEnvelope) -> None:
        send = exchange.send
        if not send.client.online or not exchange.alive:
            self.trace.emit("response_lost", send=send.index, trial=exchange.trial)
            return
        self.trace.emit("http_response", send=send.index, trial=exchange.trial,
                        status=resp.status.value, channel=resp.channel.value,
                        bytes=len(resp.body), body_sha=body_digest(resp.body))
        effects = send.machine.on_http_response(resp)
        if not effects:
            self.trace.emit("duplicate_dropped", send=send.index, via="http")
            return
        self._interpret(send, effects)

    # -- push channel ---------------------------------------------------------

    def _register_push(self, send: SimSend, eff: RegisterPush) -> None:
        client = send.client
        key = eff.rid.dedup_key
        self.schedule(eff.wait_ms, lambda s=send, e=eff: self._push_timer(s, e.epoch))
        if not client.online:
            self.trace.emit("push_register_failed", send=send.index, reason="offline")
            self.schedule(self.lat_push, lambda s=send: self._interpret(
                s, s.machine.on_push_register_failed()))
            return
        conn = client.conn
        if conn is None or not conn.usable():
            client.conn_counter += 1
            conn = SimPushConn(f"{client.name}-p{client.conn_counter}", client)
            conn.session = PushSession(self.core, self._pipe_to_client(conn), conn.id)
            client.conn = conn
            self.trace.emit("push_conn_open", conn=conn.id)
        # Always (re)send the Register frame: an interleaved HTTP retry may
        # have replaced and consumed the server-side registration, so the
        # local slot alone does not prove the server still routes here.
        # Redundant registers are idempotent on the server.
        conn.slots[key] = send
        data = encode_push_frame(register_frame(eff.rid, self.scenario.auth_token))
        self.wire["push_bytes"] += len(data)
        self.trace.emit("push_register_sent", send=send.index, key=key, conn=conn.id,
                        bytes=len(data))
        self.schedule(self.lat_push, lambda c=conn, d=data: self._server_push_message(c, d))

    def _pipe_to_client(self, conn: SimPushConn):
        def pipe(data: bytes) -> None:
            if not conn.alive:
                raise ConnectionError(f"push connection {conn.id} is dead")
            self.wire["push_bytes"] += len(data)
            self.trace.emit("push_write", conn=conn.id, bytes=len(data))
            self.schedule(self.lat_push, lambda: self._client_push_message(conn, data))

        return pipe

    def _server_push_message(self, conn: SimPushConn, data: bytes) -> None:
        if not conn.alive or conn.session.state is not ConnState.OPEN:
            self.trace.emit("frame_lost", conn=conn.id, direction="up")
            return
        if not conn.session.on_message(data):
            conn.session.mark_dead()
            conn.alive = False
            self.trace.emit("push_conn_closed", conn=conn.id, by="server")

    def _client_push_message(self, conn: SimPushConn, data: bytes) -> None:
        if not conn.alive or conn.client_closed or not conn.client.online:
            self.trace.emit("frame_lost", conn=conn.id, direction="down")
            return
        frame = decode_push_frame(data)
        if frame.kind is FrameKind.DELIVER:
            key = frame.rid.dedup_key
            resp = ResponseEnvelope(frame.rid, status_from_code(frame.meta or "OK"),
                                    Channel.PUSH, frame.body)
            self.trace.emit("push_deliver", conn=conn.id, key=key,
                            status=resp.status.value, bytes=len(frame.body),
                            body_sha=body_digest(frame.body))
            send = conn.slots.pop(key, None)
            if send is None:
                self.trace.emit("duplicate_dropped", conn=conn.id, via="push")
                return
            effects = send.machine.on_push_delivered(resp)
            if not effects:
                self.trace.emit("duplicate_dropped", send=send.index, via="push")
                return
            self._interpret(send, effects)
        elif frame.kind is FrameKind.REGISTER_ACK:
            self.trace.emit("push_ack", conn=conn.id, meta=frame.meta or "OK")
        elif frame.kind is FrameKind.CLOSE:
            self.trace.emit("push_conn_closed", conn=conn.id, by="server_goodbye")
            conn.alive = False
            waiting = list(conn.slots.values())
            conn.slots.clear()
            for send in waiting:
                self._interpret(send, send.machine.on_push_dead())

    def _push_timer(self, send: SimSend, epoch: int) -> None:
        effects = send.machine.on_push_timeout(epoch)
        if effects:
            self.trace.emit("push_timeout", send=send.index)
            self._interpret(send, effects)

    def _release_push(self, send: SimSend, eff: ReleasePush) -> None:
        client = send.client
        conn = client.conn
        if conn is None or not conn.usable():
            return
        conn.slots.pop(eff.rid.dedup_key, None)
        if not conn.slots:
            # Last outstanding registration resolved: close the socket.
            data = encode_push_frame(close_frame())
            conn.client_closed = True
            self.wire["push_bytes"] += len(data)
            self.trace.emit("push_close_sent", conn=conn.id)
            self.schedule(self.lat_push, lambda c=conn, d=data: self._server_push_message(c, d))

    # -- faults ----------------------------------------------------------------

    def _apply_fault(self, fault) -> None:
        client = self.clients.get(fault.client)
        if client is None:
            return
        if fault.kind == "client_offline":
            if not client.online:
                return
            client.online = False
            self.trace.emit("client_offline", client=client.name)
            for send in self.sends:
                if send.client is client and send.current_exchange is not None \
                        and send.current_exchange.alive:
                    send.current_exchange.alive = False
                    self.core.deregister_presence(
                        send.current_exchange.env.rid.dedup_key,
                        HttpRoute(send.current_exchange))
            self._kill_conn(client, reason="offline")
        elif fault.kind == "client_online":
            if not client.online:
                client.online = True
                self.trace.emit("client_online", client=client.name)
        elif fault.kind == "kill_push_conn":
            self._kill_conn(client, reason="killed")

    def _kill_conn(self, client: SimClient, reason: str) -> None:
        conn = client.conn
        if conn is None or not conn.alive:
            return
        conn.alive = False
        self.trace.emit("push_conn_killed", conn=conn.id, reason=reason)
        conn.session.mark_dead()
        waiting = list(conn.slots.values())
        conn.slots.clear()
        for send in waiting:
            self._interpret(send, send.machine.on_push_dead())

    # -- assembly ----------------------------------------------------------------

    def _assemble(self) -> Trace:
        outcomes = []
        raw_bodies: dict[int, bytes] = {}
        for send in self.sends:
            row: dict = {"send": send.index, "client": send.client.name,
                         "forced": send.spec.forced}
            if send.machine is not None:
                row["key"] = send.machine.key
                row["rid"] = send.machine.rid.canonical()
                row["trials"] = send.machine.rid.trial
            if send.outcome is not None:
                row["status"] = send.outcome.status.value
                row["channel"] = send.outcome.channel.value
                row["body_len"] = len(send.outcome.body or b"")
                row["body_sha"] = body_digest(send.outcome.body or b"")
                if send.outcome.body is not None:
                    raw_bodies[send.index] = send.outcome.body
            elif send.error is not None:
                row["error"] = send.error.kind
            else:
                row["status"] = "incomplete"
            outcomes.append(row)

        counts = self.core.execution_counts()
        cached = [key for key in counts
                  if (rec := self.core.record(key)) is not None
                  and rec.state is RecordState.COMPLETED]
        open_regs: list[str] = []
        for name in sorted(self.clients):
            client = self.clients[name]
            if client.conn is not None and client.conn.usable():
                open_regs.extend(client.conn.slots.keys())
        push_presence = [key for key in counts
                         if isinstance(self.core.presence_route(key), PushRoute)]

        return Trace(
            scenario_name=self.scenario.name,
            seed=self.seed,
            end_time_ms=self.scenario.end_time_ms,
            latency=dict(self.scenario.latency),
            events=self.trace.events,
            outcomes=outcomes,
            execution_counts=counts,
            forced_keys=sorted(self.forced_keys),
            failed_keys=sorted(self.failed_keys),
            expected_bodies=self.expected_bodies,
            cached_keys_at_end=cached,
            open_client_registrations=open_regs,
            push_presence_at_end=push_presence,
            clients_online_at_end={name: c.online for name, c in self.clients.items()},
            wire=self.wire,
            request_sizes=self.request_sizes,
            raw_bodies=raw_bodies,
        )


def run(scenario: ScenarioSpec, seed: int = 0, *, break_dedup: bool = False) -> Trace:
    """Deterministic: identical (scenario, seed) yield byte-identical traces."""
    return SimWorld(scenario, seed, break_dedup=break_dedup).run()
