import threading

import pytest

from rmaws.envelope import Channel, RequestEnvelope, ResponseStatus, make_request_id
from rmaws.server import (
    AppendOnlyFileStore,
    HandlerRegistry,
    HttpRoute,
    PushRoute,
    RecordState,
    ServerCore,
    make_synthetic,
    synthetic_body,
)

TOKEN = "sekrit"


class FakeClock:
    def __init__(self, t=0):
        self.t = t

    def __call__(self):
        return self.t


def envelope(service="orders", ts=1000, trial=1, forced=False, payload=b"p", device="devA"):
    rid = make_request_id(device, ts, service, trial, forced)
    return RequestEnvelope(rid, forced, service, payload)


def counting_registry(name="orders", output=b"BODY", delay_ms=0):
    calls = []

    def fn(payload):
        calls.append(payload)
        return output

    reg = HandlerRegistry()
    reg.add(make_synthetic(name, delay_ms=delay_ms))
    reg.get(name).fn = fn
    return reg, calls


def make_core(reg=None, **kw):
    if reg is None:
        reg, _ = counting_registry()
    kw.setdefault("auth_token", TOKEN)
    kw.setdefault("clock", FakeClock())
    return ServerCore(reg, **kw)


def run_once(core, env, waiter=None):
    """Drive one request to completion the way a driver would."""
    handler = core.handlers.get(env.service_name)
    result = core.submit(env, waiter or object())
    if result.kind == "replay":
        return result.response, None
    assert result.kind == "execute"
    try:
        body = handler.run(env.payload)
        plan = core.finish(result.ticket, body=body)
    except Exception as exc:
        plan = core.finish(result.ticket, error_code=f"{type(exc).__name__}: {exc}")
    return plan.response_for(env.rid, Channel.HTTP), plan


class TestValidate:
    def test_ok(self):
        core = make_core()
        assert core.validate(envelope(), TOKEN) is None

    def test_unknown_service(self):
        core = make_core()
        err = core.validate(envelope(service="nope"), TOKEN)
        assert err is not None and err.reason == "UnknownService"

    def test_unauthorized(self):
        core = make_core()
        err = core.validate(envelope(), "wrong")
        assert err is not None and err.reason == "Unauthorized"
        resp = err.response_for(envelope().rid, Channel.HTTP)
        assert resp.status is ResponseStatus.VALIDATION_ERROR


class TestCacheLookup:
    def test_fresh_key_misses(self):
        core = make_core()
        assert core.cache_lookup(envelope().rid.dedup_key, forced=False) == "miss"

    def test_completed_hit_and_forced_miss(self):
        core = make_core()
        env = envelope()
        run_once(core, env)
        assert core.cache_lookup(env.rid.dedup_key, forced=False) == "hit"
        assert core.cache_lookup(env.rid.dedup_key, forced=True) == "miss"

    def test_pending(self):
        core = make_core()
        env = envelope()
        result = core.submit(env, object())
        assert result.kind == "execute"
        assert core.cache_lookup(env.rid.dedup_key, forced=False) == "pending"


class TestDeduplication:
    def test_repeat_rid_replays_without_reexecution(self):
        # Oracle: the handler's own invocation counter.
        reg, calls = counting_registry()
        core = make_core(reg)
        first = envelope(trial=1)
        retry = envelope(trial=2)
        resp1, _ = run_once(core, first)
        resp2, _ = run_once(core, retry)
        assert len(calls) == 1
        assert core.execution_count(first.rid.dedup_key) == 1
        assert resp2.channel is Channel.CACHE_REPLAY
        assert resp2.body == resp1.body

    def test_failed_record_is_not_replayed(self):
        # Oracle: invocation counter reaches 2 after a scripted failure.
        reg = HandlerRegistry().add(make_synthetic("orders", fail_times=1))
        calls = []
        inner = reg.get("orders").fn

        def fn(payload):
            calls.append(payload)
            return inner(payload)

        reg.get("orders").fn = fn
        core = make_core(reg)
        env = envelope()
        resp1, _ = run_once(core, env)
        assert resp1.status is ResponseStatus.SERVICE_ERROR
        assert core.record(env.rid.dedup_key).state is RecordState.FAILED
        resp2, _ = run_once(core, envelope(trial=2))
        assert resp2.status is ResponseStatus.OK
        assert len(calls) == 2
        assert core.execution_count(env.rid.dedup_key) == 2

    def test_single_flight_attaches_waiters(self):
        reg, calls = counting_registry()
        core = make_core(reg)
        env = envelope()
        grant = core.submit(env, "w0")
        assert grant.kind == "execute"
        for i in range(5):
            attached = core.submit(envelope(trial=i + 2), f"w{i + 1}")
            assert attached.kind == "wait"
        body = core.handlers.get("orders").run(env.payload)
        plan = core.finish(grant.ticket, body=body)
        assert len(plan.waiters) == 6
        assert len(calls) == 1
        assert plan.response_for(env.rid, Channel.HTTP).body == b"BODY"

    def test_single_flight_under_threads(self):
        release = threading.Event()
        calls = []

        def slow(payload):
            calls.append(payload)
            release.wait(5)
            return b"S"

        reg = HandlerRegistry().add(make_synthetic("orders"))
        reg.get("orders").fn = slow
        core = make_core(reg)
        results = []

        def worker(trial):
            resp, _ = run_once(core, envelope(trial=trial))
            results.append(resp.body)

        first = core.submit(envelope(trial=1), "owner")
        assert first.kind == "execute"
        threads = [threading.Thread(target=lambda t=t: results.append(core.submit(envelope(trial=t), f"t{t}").kind))
                   for t in range(2, 10)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        release.set()
        plan = core.finish(first.ticket, body=core.handlers.get("orders").run(b"p"))
        assert results.count("wait") == 8
        assert len(plan.waiters) == 9
        assert len(calls) == 1

    def test_break_dedup_reexecutes(self):
        reg, calls = counting_registry()
        core = make_core(reg, break_dedup=True)
        run_once(core, envelope(trial=1))
        run_once(core, envelope(trial=2))
        assert len(calls) == 2
        assert core.execution_count(envelope().rid.dedup_key) == 2


class TestForced:
    def test_forced_reexecutes_and_overwrites(self):
        bodies = iter([b"first", b"second"])
        reg = HandlerRegistry().add(make_synthetic("orders"))
        reg.get("orders").fn = lambda p: next(bodies)
        core = make_core(reg)
        plain = envelope()
        resp1, _ = run_once(core, plain)
        assert resp1.body == b"first"

        forced = envelope(trial=2, forced=True)
        resp2, _ = run_once(core, forced)
        assert resp2.body == b"second"
        assert core.execution_count(plain.rid.dedup_key) == 2

        resp3, _ = run_once(core, envelope(trial=3))
        assert resp3.channel is Channel.CACHE_REPLAY
        assert resp3.body == b"second"
        assert core.execution_count(plain.rid.dedup_key) == 2

    def test_old_result_replayable_while_forced_runs(self):
        reg, calls = counting_registry()
        core = make_core(reg)
        run_once(core, envelope())
        grant = core.submit(envelope(trial=2, forced=True), "forced-waiter")
        assert grant.kind == "execute"
        mid = core.submit(envelope(trial=3), "plain-waiter")
        assert mid.kind == "replay"
        assert mid.response.body == b"BODY"
        core.finish(grant.ticket, body=b"NEW")
        after = core.submit(envelope(trial=4), "w")
        assert after.response.body == b"NEW"

    def test_concurrent_forced_coalesce(self):
        core = make_core()
        run_once(core, envelope())
        g1 = core.submit(envelope(trial=2, forced=True), "a")
        g2 = core.submit(envelope(trial=3, forced=True), "b")
        assert g1.kind == "execute"
        assert g2.kind == "wait"


class TestPresence:
    def test_register_replaces(self):
        core = make_core()
        key = envelope().rid.dedup_key
        http = HttpRoute(exchange="ex1")
        push = PushRoute(conn="c1", rid=envelope().rid)
        core.register_presence(key, http)
        core.register_presence(key, push)
        assert core.presence_route(key) is push

    def test_stale_deregister_ignored(self):
        core = make_core()
        key = envelope().rid.dedup_key
        http = HttpRoute(exchange="ex1")
        push = PushRoute(conn="c1", rid=envelope().rid)
        core.register_presence(key, http)
        core.register_presence(key, push)
        core.deregister_presence(key, http)
        assert core.presence_route(key) is push
        core.deregister_presence(key, push)
        assert core.presence_route(key) is None

    def test_deregister_then_finish_caches_only(self):
        core = make_core()
        env = envelope()
        ex = HttpRoute(exchange="ex1")
        grant = core.submit(env, "w", route=ex)
        core.deregister_presence(env.rid.dedup_key, ex)
        plan = core.finish(grant.ticket, body=b"B")
        assert plan.push is None
        assert core.record(env.rid.dedup_key).state is RecordState.COMPLETED
        follow, _ = run_once(core, envelope(trial=2))
        assert follow.channel is Channel.CACHE_REPLAY

    def test_finish_returns_push_route(self):
        core = make_core()
        env = envelope()
        grant = core.submit(env, "w", route=HttpRoute(exchange="ex1"))
        meta, resp = core.register_push(env.rid.with_trial(2), "conn1", TOKEN)
        assert (meta, resp) == ("OK", None)
        plan = core.finish(grant.ticket, body=b"B")
        assert plan.push is not None and plan.push.conn == "conn1"
        assert core.presence_route(env.rid.dedup_key) is None


class TestRegisterPush:
    def test_bad_token(self):
        core = make_core()
        assert core.register_push(envelope().rid, "c", "nope") == ("UA", None)

    def test_no_record_acks_not_cached(self):
        core = make_core()
        meta, resp = core.register_push(envelope().rid, "c", TOKEN)
        assert (meta, resp) == ("NC", None)

    def test_completed_record_delivers_immediately(self):
        core = make_core()
        env = envelope()
        run_once(core, env)
        meta, resp = core.register_push(env.rid.with_trial(2), "c", TOKEN)
        assert meta == "OK"
        assert resp.channel is Channel.PUSH
        assert resp.body == b"BODY"
        assert core.presence_route(env.rid.dedup_key) is None

    def test_duplicate_registration_is_idempotent(self):
        core = make_core()
        env = envelope()
        core.submit(env, "w")
        assert core.register_push(env.rid, "c", TOKEN)[0] == "OK"
        assert core.register_push(env.rid, "c", TOKEN)[0] == "DUP"

    def test_conn_closed_clears_only_its_keys(self):
        core = make_core()
        ridA = envelope(ts=1).rid
        ridB = envelope(ts=2).rid
        core.submit(envelope(ts=1), "w1")
        core.submit(envelope(ts=2), "w2")
        core.register_push(ridA, "connA", TOKEN)
        core.register_push(ridB, "connB", TOKEN)
        core.conn_closed("connA")
        assert core.presence_route(ridA.dedup_key) is None
        assert core.presence_route(ridB.dedup_key) is not None


class TestTtl:
    def test_expired_entry_reexecutes(self):
        clock = FakeClock(0)
        reg, calls = counting_registry()
        core = make_core(reg, clock=clock, cache_ttl_ms=100)
        run_once(core, envelope())
        clock.t = 90
        assert core.cache_lookup(envelope().rid.dedup_key, forced=False) == "hit"
        clock.t = 150
        assert core.cache_lookup(envelope().rid.dedup_key, forced=False) == "miss"
        run_once(core, envelope(trial=2))
        assert len(calls) == 2


class TestStore:
    def test_memory_store_round_trip(self):
        from rmaws.server import MemoryStore

        store = MemoryStore()
        reg, _ = counting_registry()
        core = make_core(reg, store=store)
        run_once(core, envelope())

        reg2, calls2 = counting_registry()
        core2 = make_core(reg2, store=store)
        resp, _ = run_once(core2, envelope(trial=2))
        assert resp.channel is Channel.CACHE_REPLAY
        assert calls2 == []

    def test_file_store_round_trip(self, tmp_path):
        path = str(tmp_path / "records.jsonl")
        store = AppendOnlyFileStore(path)
        reg, _ = counting_registry()
        core = make_core(reg, store=store)
        env = envelope()
        run_once(core, env)

        reg2, calls2 = counting_registry()
        core2 = make_core(reg2, store=AppendOnlyFileStore(path))
        resp, _ = run_once(core2, envelope(trial=2))
        assert resp.channel is Channel.CACHE_REPLAY
        assert resp.body == b"BODY"
        assert calls2 == []


class TestSyntheticHandlers:
    def test_synthetic_body_deterministic_and_sized(self):
        a = synthetic_body("svc", b"p", 191745)
        b = synthetic_body("svc", b"p", 191745)
        assert a == b
        assert len(a) == 191745
        assert synthetic_body("svc", b"q", 64) != synthetic_body("svc", b"p", 64)

    @pytest.mark.parametrize("size", [5, 191745])
    def test_configured_output_size(self, size):
        handler = make_synthetic("orders", output_size=size)
        assert len(handler.run(b"payload")) == size

    def test_echo_by_default(self):
        handler = make_synthetic("orders")
        assert handler.run(b"zz") == b"zz"

    def test_fail_times(self):
        handler = make_synthetic("orders", fail_times=2)
        for _ in range(2):
            with pytest.raises(Exception):
                handler.run(b"p")
        assert handler.run(b"p") == b"p"
