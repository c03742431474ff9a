"""Protocol engine: execution cache, deduplication, presence, routing.

The core is sans-IO. Drivers (the live HTTP server and the virtual-clock
simulator) decode envelopes, run service handlers and perform transport
writes; every state transition lives here, behind one lock, so both
drivers exhibit identical protocol behaviour.

Locking: a single registry lock guards all record and presence mutations.
It is held only for bookkeeping (microseconds), never while a handler
runs, so executions for different keys proceed in parallel while all
mutations for one dedup key are serialized.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from ..envelope import (
    MAX_TIMESTAMP_MS,
    MAX_TRIAL,
    Channel,
    RequestEnvelope,
    RequestId,
    ResponseEnvelope,
    ResponseStatus,
)
from .handlers import HandlerRegistry
from .store import RecordStore, StoredRecord

log = logging.getLogger(__name__)


class RecordState(str, Enum):
    PENDING = "Pending"
    COMPLETED = "Completed"
    FAILED = "Failed"


@dataclass(frozen=True)
class ExecutionRecord:
    """Snapshot of the per-key server state (the dedup/cache unit)."""

    dedup_key: str
    state: RecordState
    body: bytes | None
    error_code: str | None
    created_at: int
    completed_at: int | None
    execution_count: int


@dataclass(frozen=True)
class ValidationError:
    reason: str  # BadId | UnknownService | Unauthorized
    detail: str

    def response_for(self, rid: RequestId, channel: Channel) -> ResponseEnvelope:
        body = f"{self.reason}: {self.detail}".encode("utf-8")
        return ResponseEnvelope(rid, ResponseStatus.VALIDATION_ERROR, channel, body)


@dataclass
class HttpRoute:
    """Client is waiting on an open HTTP exchange."""

    exchange: object


@dataclass
class PushRoute:
    """Client is waiting on a push connection, registered under ``rid``."""

    conn: object
    rid: RequestId


def _same_route(a, b) -> bool:
    if isinstance(a, HttpRoute) and isinstance(b, HttpRoute):
        return a.exchange is b.exchange
    if isinstance(a, PushRoute) and isinstance(b, PushRoute):
        return a.conn is b.conn
    return False


@dataclass
class _Entry:
    key: str
    created_at: int
    execution_count: int = 0
    pending: bool = False
    result: tuple | None = None  # ("ok", body) | ("failed", error_code)
    completed_at: int | None = None
    waiters: list = field(default_factory=list)


@dataclass
class ExecutionTicket:
    """Permission to run the handler for one granted execution."""

    env: RequestEnvelope
    key: str
    granted_at: int
    _entry: _Entry


@dataclass
class DeliveryPlan:
    """Everything the driver needs to deliver one completed execution."""

    key: str
    status: ResponseStatus
    body: bytes | None
    error_code: str | None
    waiters: list
    push: PushRoute | None
    completed_at: int

    def response_for(self, rid: RequestId, channel: Channel) -> ResponseEnvelope:
        if self.status is ResponseStatus.OK:
            return ResponseEnvelope(rid, ResponseStatus.OK, channel, self.body or b"")
        return ResponseEnvelope(
            rid, self.status, channel, f"service error: {self.error_code}".encode("utf-8")
        )


@dataclass
class SubmitResult:
    kind: str  # "replay" | "execute" | "wait"
    response: ResponseEnvelope | None = None
    ticket: ExecutionTicket | None = None


class ServerCore:
    """State machine shared by the live server and the simulator."""

    def __init__(
        self,
        handlers: HandlerRegistry,
        *,
        auth_token: str = "",
        clock: Callable[[], int] | None = None,
        store: RecordStore | None = None,
        cache_ttl_ms: int | None = None,
        events: Callable[[str, dict], None] | None = None,
        break_dedup: bool = False,
    ):
        self.handlers = handlers
        self.auth_token = auth_token
        self.clock = clock if clock is not None else _wall_ms
        self.store = store
        self.cache_ttl_ms = cache_ttl_ms
        self.break_dedup = break_dedup
        self._events = events
        self._lock = threading.RLock()
        self._entries: dict[str, _Entry] = {}
        self._presence: dict[str, HttpRoute | PushRoute] = {}
        if store is not None:
            for key, rec in store.load_all().items():
                entry = _Entry(key, created_at=rec.completed_at)
                entry.execution_count = rec.execution_count
                entry.completed_at = rec.completed_at
                if rec.status == "ok":
                    entry.result = ("ok", rec.body)
                else:
                    entry.result = ("failed", rec.error_code or "unknown")
                self._entries[key] = entry

    def emit(self, kind: str, **fields) -> None:
        if self._events is not None:
            self._events(kind, dict(fields, t=self.clock()))
        else:
            log.debug("%s %s", kind, fields)

    # -- validation ---------------------------------------------------

    def validate(self, env: RequestEnvelope, token: str) -> ValidationError | None:
        rid = env.rid
        if not (1 <= rid.trial <= MAX_TRIAL) or not (0 <= rid.timestamp_ms <= MAX_TIMESTAMP_MS):
            return ValidationError("BadId", "identifier fields out of range")
        if self.handlers.get(env.service_name) is None:
            return ValidationError("UnknownService", env.service_name)
        if token != self.auth_token:
            return ValidationError("Unauthorized", "bad token")
        return None

    # -- execution cache ----------------------------------------------

    def _expired(self, entry: _Entry, now: int) -> bool:
        return (
            self.cache_ttl_ms is not None
            and entry.result is not None
            and entry.completed_at is not None
            and now - entry.completed_at > self.cache_ttl_ms
        )

    def cache_lookup(self, dedup_key: str, forced: bool) -> str:
        """Non-mutating inspection: "miss", "pending" or "hit"."""
        now = self.clock()
        with self._lock:
            entry = self._entries.get(dedup_key)
            if entry is None:
                return "miss"
            if entry.pending:
                return "pending"
            if forced:
                return "miss"
            if entry.result is not None and entry.result[0] == "ok" and not self._expired(entry, now):
                return "hit"
            return "miss"

    def submit(self, env: RequestEnvelope, waiter, route=None) -> SubmitResult:
        """Run the cache check and claim or join an execution.

        "replay": a completed response exists; respond immediately.
        "execute": the caller must run the handler and call finish().
        "wait": joined an in-flight execution; the waiter is notified.
        On "execute"/"wait" the given presence route (if any) replaces the
        stored one for the key; replay paths never touch presence.
        """
        now = self.clock()
        key = env.rid.dedup_key
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                entry = _Entry(key, created_at=now)
                self._entries[key] = entry
            if self._expired(entry, now):
                self.emit("cache_expired", key=key)
                entry.result = None
                entry.completed_at = None

            if self.break_dedup:
                # Mutation mode for the invariant checker: every request
                # executes, nothing replays or coalesces.
                entry.execution_count += 1
                entry.pending = True
                entry.waiters.append(waiter)
                if route is not None:
                    self._register_presence_locked(key, route)
                self.emit("execute_begin", key=key, count=entry.execution_count, forced=env.is_forced)
                return SubmitResult("execute", ticket=ExecutionTicket(env, key, now, entry))

            replayable = (
                not env.is_forced
                and entry.result is not None
                and entry.result[0] == "ok"
            )
            if replayable:
                entry_body = entry.result[1]
                self.emit("cache_hit", key=key, trial=env.rid.trial)
                resp = ResponseEnvelope(env.rid, ResponseStatus.OK, Channel.CACHE_REPLAY, entry_body)
                return SubmitResult("replay", response=resp)

            if entry.pending:
                entry.waiters.append(waiter)
                if route is not None:
                    self._register_presence_locked(key, route)
                self.emit("attach_wait", key=key, trial=env.rid.trial)
                return SubmitResult("wait")

            # Miss: fresh key, failed record, expired entry, or forced
            # re-execution (the prior completed result, if any, stays
            # replayable until the new execution completes).
            entry.pending = True
            entry.execution_count += 1
            entry.waiters.append(waiter)
            if route is not None:
                self._register_presence_locked(key, route)
            self.emit("execute_begin", key=key, count=entry.execution_count, forced=env.is_forced)
            return SubmitResult("execute", ticket=ExecutionTicket(env, key, now, entry))

    def finish(self, ticket: ExecutionTicket, *, body: bytes | None = None,
               error_code: str | None = None) -> DeliveryPlan:
        """Record the execution result and plan its delivery.

        The presence route for the key is consumed here; HTTP waiters in
        the plan deliver to their own exchanges, and a push route (if it
        is the stored one) is returned for the driver to write.
        """
        now = self.clock()
        entry = ticket._entry
        with self._lock:
            entry.pending = False
            entry.completed_at = now
            if error_code is None:
                entry.result = ("ok", body if body is not None else b"")
                status = ResponseStatus.OK
                self.emit("record_completed", key=ticket.key, size=len(entry.result[1]),
                          count=entry.execution_count)
            else:
                entry.result = ("failed", error_code)
                status = ResponseStatus.SERVICE_ERROR
                self.emit("record_failed", key=ticket.key, error=error_code)
            waiters = entry.waiters
            entry.waiters = []
            route = self._presence.pop(ticket.key, None)
            if route is not None:
                self.emit("presence_consumed", key=ticket.key, route=_route_name(route))
            if self.store is not None:
                self.store.save(ticket.key, StoredRecord(
                    status="ok" if error_code is None else "failed",
                    body=entry.result[1] if error_code is None else b"",
                    error_code=error_code,
                    completed_at=now,
                    execution_count=entry.execution_count,
                ))
        return DeliveryPlan(
            key=ticket.key,
            status=status,
            body=body,
            error_code=error_code,
            waiters=waiters,
            push=route if isinstance(route, PushRoute) else None,
            completed_at=now,
        )

    # -- presence -------------------------------------------------------

    def _register_presence_locked(self, key: str, route) -> None:
        prev = self._presence.get(key)
        self._presence[key] = route
        self.emit(
            "presence_register",
            key=key,
            route=_route_name(route),
            replaced=_route_name(prev) if prev is not None else None,
        )

    def register_presence(self, dedup_key: str, route) -> None:
        """Register where the client waits; replaces any existing route."""
        with self._lock:
            self._register_presence_locked(dedup_key, route)

    def deregister_presence(self, dedup_key: str, route) -> None:
        """Remove the route if it is still the stored one (stale-safe)."""
        with self._lock:
            cur = self._presence.get(dedup_key)
            if cur is not None and _same_route(cur, route):
                del self._presence[dedup_key]
                self.emit("presence_deregister", key=dedup_key, route=_route_name(route))

    def presence_route(self, dedup_key: str):
        with self._lock:
            return self._presence.get(dedup_key)

    # -- push channel ----------------------------------------------------

    def register_push(self, rid: RequestId, conn, token: str) -> tuple[str, ResponseEnvelope | None]:
        """Bind a rid to a push connection.

        Returns (ack_meta, immediate_response). ack_meta is "UA" for a bad
        token, "DUP" for an idempotent re-registration (no ack is sent),
        "NC" when the key has no record yet, else "OK". When the record is
        already complete the response is returned for immediate delivery
        and no presence is stored (the registration is consumed at once).
        """
        if token != self.auth_token:
            self.emit("push_register_denied", rid=rid.canonical())
            return "UA", None
        now = self.clock()
        key = rid.dedup_key
        with self._lock:
            cur = self._presence.get(key)
            if isinstance(cur, PushRoute) and cur.conn is conn:
                self.emit("push_register_duplicate", key=key)
                return "DUP", None
            entry = self._entries.get(key)
            if entry is not None and entry.result is not None and not entry.pending \
                    and not self._expired(entry, now):
                status, payload = entry.result
                if status == "ok":
                    resp = ResponseEnvelope(rid, ResponseStatus.OK, Channel.PUSH, payload)
                else:
                    resp = ResponseEnvelope(
                        rid, ResponseStatus.SERVICE_ERROR, Channel.PUSH,
                        f"service error: {payload}".encode("utf-8"),
                    )
                self.emit("push_register_completed", key=key)
                return "OK", resp
            self._register_presence_locked(key, PushRoute(conn, rid))
            return ("OK" if entry is not None else "NC"), None

    def conn_closed(self, conn) -> None:
        """Drop every registration held by a closed push connection."""
        with self._lock:
            stale = [
                key for key, route in self._presence.items()
                if isinstance(route, PushRoute) and route.conn is conn
            ]
            for key in stale:
                del self._presence[key]
                self.emit("presence_deregister", key=key, route="push")

    # -- introspection ----------------------------------------------------

    def execution_count(self, dedup_key: str) -> int:
        with self._lock:
            entry = self._entries.get(dedup_key)
            return entry.execution_count if entry else 0

    def execution_counts(self) -> dict[str, int]:
        with self._lock:
            return {k: e.execution_count for k, e in self._entries.items()}

    def record(self, dedup_key: str) -> ExecutionRecord | None:
        with self._lock:
            entry = self._entries.get(dedup_key)
            if entry is None:
                return None
            if entry.result is not None and entry.result[0] == "ok":
                state = RecordState.COMPLETED
                body, error = entry.result[1], None
            elif entry.pending:
                state, body, error = RecordState.PENDING, None, None
            elif entry.result is not None:
                state, body, error = RecordState.FAILED, None, entry.result[1]
            else:
                state, body, error = RecordState.PENDING, None, None
            return ExecutionRecord(
                dedup_key=dedup_key,
                state=state,
                body=body,
                error_code=error,
                created_at=entry.created_at,
                completed_at=entry.completed_at,
                execution_count=entry.execution_count,
            )


def _route_name(route) -> str:
    return "http" if isinstance(route, HttpRoute) else "push"


def _wall_ms() -> int:
    import time

    return int(time.time() * 1000)
