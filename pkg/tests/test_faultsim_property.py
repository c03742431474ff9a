"""Randomized scenario fuzzing: protocol invariants under arbitrary
bounded fault mixes.

The generator keeps scenarios inside the protocol's contract so the
invariants must hold: every fault lands within the first 1.2 s, at most
one offline window no longer than 600 ms, and four trials whose combined
recovery horizon comfortably covers that window. Within those bounds any
interleaving the generator finds is a real counterexample.
"""

from hypothesis import given, settings
import hypothesis.strategies as st

from rmaws.faultsim import (
    FaultSpec,
    ScenarioSpec,
    SendSpec,
    ServiceProfile,
    check_invariants,
    run,
)

TRIALS = 4
HTTP_TIMEOUT = 200
PUSH_WAIT = 300


def _scenario(delay_ms, send_times, drop_faults, offline_window, kill_times):
    sends = [
        SendSpec(t=t, service="svc", payload_size=16 + i,
                 http_timeout_ms=HTTP_TIMEOUT, push_wait_ms=PUSH_WAIT,
                 max_trials=TRIALS)
        for i, t in enumerate(send_times)
    ]
    faults = []
    for send_index, trial, kind in drop_faults:
        if send_index < len(sends):
            faults.append(FaultSpec(kind=kind, send=send_index, trial=trial))
    timed = []
    if offline_window is not None:
        start, length = offline_window
        timed.append(FaultSpec(kind="client_offline", client="c1", t=start))
        timed.append(FaultSpec(kind="client_online", client="c1", t=start + length))
    timed.extend(FaultSpec(kind="kill_push_conn", client="c1", t=t) for t in kill_times)
    faults.extend(sorted(timed, key=lambda f: f.t))
    return ScenarioSpec(
        name="fuzz",
        end_time_ms=120_000,
        services=[ServiceProfile(name="svc", delay_ms=delay_ms, output_size=128)],
        sends=sends,
        faults=faults,
    )


scenarios = st.builds(
    _scenario,
    delay_ms=st.integers(min_value=0, max_value=450),
    send_times=st.lists(st.integers(min_value=0, max_value=400),
                        min_size=1, max_size=2),
    drop_faults=st.lists(
        st.tuples(st.integers(0, 1), st.integers(1, 2),
                  st.sampled_from(["drop_request", "drop_http_response"])),
        max_size=4,
    ),
    offline_window=st.none() | st.tuples(st.integers(0, 1_000), st.integers(50, 600)),
    kill_times=st.lists(st.integers(0, 1_200), max_size=2),
)


@settings(max_examples=80, deadline=None)
@given(scenarios)
def test_invariants_hold_under_random_fault_mixes(scenario):
    trace = run(scenario, seed=0)
    violations = check_invariants(trace)
    assert violations == [], [v.to_dict() for v in violations]


@settings(max_examples=25, deadline=None)
@given(scenarios, st.integers(0, 2**16))
def test_traces_are_deterministic(scenario, seed):
    assert run(scenario, seed).to_jsonl() == run(scenario, seed).to_jsonl()
