import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _fakes import FakePath, ManualClock, random_scenario, run_scenario, two_path_manager
from flowmigrate.flow_manager import (
    CompletePlan,
    FlowManager,
    MigrationEventLog,
    Mode,
    PathError,
    PathState,
    PathUnavailable,
    SlidingRate,
    SwitchPath,
    TerminateFlow,
    UnknownPath,
)
from flowmigrate.traffic_model import FlowRecord


def test_zero_flows_completes_immediately():
    fm, clock, wifi, cell = two_path_manager()
    plan = fm.begin_migration("cellular", 10)
    assert not plan.active and plan.initial == 0
    fm.disable_path("wifi")
    assert wifi.state == PathState.DISABLED


def test_push_flow_terminated_at_begin():
    fm, clock, wifi, cell = two_path_manager()
    conn = wifi.open_connection(("push", 5223))
    plan = fm.begin_migration("cellular", 10)
    assert conn.severed
    assert plan.tallies.force_terminated == 1
    assert not plan.active


def test_infinite_wait_never_fires():
    fm, clock, wifi, cell = two_path_manager()
    conn = wifi.open_connection(("web", 443))
    plan = fm.begin_migration("cellular", math.inf)
    for t in (1, 100, 1e6):
        clock.t = t
        assert fm.tick(plan) == []
    fm.flow_closed(conn.flow_id)
    assert plan.tallies.drained_naturally == 1
    assert fm.tick(plan) == [CompletePlan("wifi")]


def test_natural_end_before_deadline():
    fm, clock, wifi, cell = two_path_manager()
    conn = wifi.open_connection(("web", 443))
    plan = fm.begin_migration("cellular", 10)
    clock.t = 4
    fm.flow_closed(conn.flow_id)
    assert fm.tick(plan) == [CompletePlan("wifi")]
    assert plan.tallies.drained_naturally == 1 and plan.tallies.force_terminated == 0
    assert not conn.severed


def test_deadline_fires_at_first_tick_after():
    fm, clock, wifi, cell = two_path_manager()
    conn = wifi.open_connection(("web", 443))
    plan = fm.begin_migration("cellular", 10)
    clock.t = 9.9
    assert fm.tick(plan) == []
    clock.t = 10.2
    actions = fm.tick(plan)
    assert actions == [TerminateFlow(conn.flow_id), CompletePlan("wifi")]
    assert conn.severed and plan.tallies.force_terminated == 1


def test_tick_without_apply_only_reports():
    fm, clock, wifi, cell = two_path_manager()
    conn = wifi.open_connection(("web", 443))
    plan = fm.begin_migration("cellular", 1)
    clock.t = 2
    assert fm.tick(plan, apply=False) == [TerminateFlow(conn.flow_id), CompletePlan("wifi")]
    assert not conn.severed and plan.active


def test_five_flow_scenario_hand_table():
    # port, natural end; wait 10 s from t=0, ticks every second
    # a: ends at 3 (drained)  b: push (forced at 0)  c: ends at 12 (forced at 10)
    # d: cut by link at 5 (disrupted)  e: ends at 9.5 (drained)
    fm, clock, wifi, cell = two_path_manager()
    a, b, c, d, e = (wifi.open_connection(("o", p)) for p in (443, 5223, 80, 993, 8080))
    plan = fm.begin_migration("cellular", 10)
    log = {}
    for t in np.arange(1, 13, 0.5):
        clock.t = float(t)
        if t == 3:
            fm.flow_closed(a.flow_id)
        if t == 5:
            fm.flow_closed(d.flow_id, disrupted=True)
        if t == 9.5:
            fm.flow_closed(e.flow_id)
        if t == 12:
            fm.flow_closed(c.flow_id)
        for action in fm.tick(plan):
            log[type(action).__name__] = float(t)
    assert plan.tallies.as_dict() == {"drained_naturally": 2, "force_terminated": 2, "migrated_clean": 0, "disrupted": 1}
    assert log == {"TerminateFlow": 10.0, "CompletePlan": 10.0}
    assert c.severed and b.severed and not a.severed


def test_begin_migration_to_down_path_changes_nothing():
    fm, clock, wifi, cell = two_path_manager()
    wifi.open_connection(("o", 443))
    cell.set_state(PathState.DOWN)
    with pytest.raises(PathUnavailable):
        fm.begin_migration("cellular", 10)
    assert fm.primary == "wifi" and fm.plans == []


def test_new_flows_pinned_to_target():
    fm, clock, wifi, cell = two_path_manager()
    wifi.open_connection(("o", 443))
    plan = fm.begin_migration("cellular", 10)
    before = wifi.opened
    for _ in range(3):
        fm.open_connection(("o", 443))
    assert wifi.opened == before and cell.opened == 3
    assert plan.tallies.migrated_clean == 3


def test_terminate_idempotent_and_unknown(caplog):
    fm, clock, wifi, cell = two_path_manager()
    conn = wifi.open_connection(("o", 443))
    assert fm.terminate_flow(conn.flow_id)
    assert not fm.terminate_flow(conn.flow_id)
    with caplog.at_level("WARNING"):
        assert not fm.terminate_flow("nope")
    assert "nope" in caplog.text


def test_set_primary_notifications():
    fm, clock, wifi, cell = two_path_manager()
    seen = []
    fm.subscribe(lambda prev, new: seen.append((prev, new)))
    assert fm.set_primary("wifi") == "wifi"
    assert fm.set_primary("cellular") == "wifi"
    fm.set_primary("cellular")
    assert seen == [("wifi", "cellular")]
    with pytest.raises(UnknownPath):
        fm.set_primary("ethernet")


def test_set_primary_refuses_down_path():
    fm, clock, wifi, cell = two_path_manager()
    cell.set_state("down")
    with pytest.raises(PathUnavailable):
        fm.set_primary("cellular")


def test_disable_path():
    fm, clock, wifi, cell = two_path_manager()
    with pytest.raises(PathError):
        fm.disable_path("wifi")
    c1, c2 = cell.open_connection(("o", 443)), cell.open_connection(("o", 80))
    fm.disable_path("cellular")
    assert c1.severed and c2.severed and not fm.live_flows("cellular")
    with pytest.raises(PathUnavailable):
        cell.open_connection(("o", 443))
    fm.enable_path("cellular")
    cell.open_connection(("o", 443))


def test_single_path_immediate_when_idle():
    fm, clock, wifi, cell = two_path_manager(switch_latency_s=0)
    plan = fm.single_path_switch("cellular", window=10)
    assert plan.switched_at == 0 and not plan.window_expired
    assert fm.primary == "cellular" and wifi.state == PathState.DISABLED


def test_single_path_waits_for_web_flow():
    fm, clock, wifi, cell = two_path_manager(switch_latency_s=0)
    web = wifi.open_connection(("o", 443))
    other = wifi.open_connection(("o", 4000))
    plan = fm.single_path_switch("cellular", window=10)
    assert plan.switched_at is None
    clock.t = 3
    fm.flow_closed(web.flow_id)
    actions = fm.tick(plan)
    assert actions == [SwitchPath("cellular", False), CompletePlan("wifi")]
    assert plan.switched_at == 3 and other.severed
    assert plan.tallies.disrupted == 1 and plan.tallies.drained_naturally == 1


def test_single_path_window_expiry():
    fm, clock, wifi, cell = two_path_manager(switch_latency_s=0)
    web = wifi.open_connection(("o", 443))
    plan = fm.single_path_switch("cellular", window=10)
    clock.t = 10
    assert fm.tick(plan)[0] == SwitchPath("cellular", True)
    assert web.severed and plan.window_expired


def test_single_path_switch_latency_on_virtual_clock():
    from flowmigrate.netharness.clock import VirtualClock

    clock = VirtualClock()
    wifi, cell = FakePath("wifi"), FakePath("cellular")
    fm = FlowManager([wifi, cell], primary="wifi", clock=clock)
    fm.single_path_switch("cellular", window=5)
    assert not cell.up
    clock.advance(0.3)
    assert cell.up and fm.primary == "cellular"


def _sweep_switch_moment(web_spans, t0, window):
    # first instant >= t0 not covered by any web span, capped at the window end
    t = t0
    for s, e in sorted(web_spans):
        if s <= t < e:
            t = e
    return min(t, t0 + window)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0.1, 20), max_size=6), st.lists(st.floats(0.1, 20), max_size=3), st.floats(1, 15))
def test_single_path_switch_matches_sweep(web_lives, other_lives, window):
    fm, clock, wifi, cell = two_path_manager(switch_latency_s=0)
    ends = {}
    for life in web_lives:
        ends[wifi.open_connection(("o", 443)).flow_id] = life
    for life in other_lives:
        ends[wifi.open_connection(("o", 4000)).flow_id] = life
    plan = fm.single_path_switch("cellular", window=window)
    for t in sorted(set(ends.values()) | {window}):
        if plan.switched_at is not None:
            break
        clock.t = t
        for fid, life in ends.items():
            if life <= t:
                fm.flow_closed(fid)
        fm.tick(plan)
    expected = _sweep_switch_moment([(0.0, life) for life in web_lives], 0.0, window)
    assert plan.switched_at == pytest.approx(expected)
    t = plan.tallies
    assert t.drained_naturally + t.disrupted == plan.initial


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 20), st.floats(0.5, 20))
def test_larger_wait_never_forces_more(seed, w1, w2):
    scenario = random_scenario(np.random.default_rng(seed))
    lo, hi = sorted((w1, w2))
    a = run_scenario(scenario, lo)[0].tallies.force_terminated
    b = run_scenario(scenario, hi)[0].tallies.force_terminated
    assert b <= a


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1.0, 10.0, 30.0, math.inf]))
def test_conservation_against_oracle(seed, wait):
    plan, fm, wifi, cell, old_opens, oracle = run_scenario(random_scenario(np.random.default_rng(seed)), wait)
    t = plan.tallies
    assert t.drained_naturally + t.force_terminated + t.disrupted == plan.initial
    assert t.as_dict() == oracle
    assert wifi.opened == old_opens


def test_event_log_jsonl(tmp_path):
    path = tmp_path / "events.jsonl"
    log = MigrationEventLog(path)
    fm, clock, wifi, cell = two_path_manager(event_log=log)
    conn = wifi.open_connection(("o", 443))
    plan = fm.begin_migration("cellular", 1)
    clock.t = 1
    fm.tick(plan)
    fm.disable_path("wifi")
    log.close()
    events = [json.loads(line) for line in path.read_text().splitlines()]
    assert [e["event"] for e in events] == ["set_primary", "begin", "terminate", "complete", "disable"]
    assert events[2]["flow_id"] == conn.flow_id
    assert events[3]["tallies"]["force_terminated"] == 1


def test_sync_flows_polling():
    fm, clock, wifi, cell = two_path_manager()
    fm.sync_flows("wifi", [FlowRecord("x", 0, None, 443), FlowRecord("y", 0, None, 80)])
    assert {f.flow_id for f in fm.live_flows("wifi")} == {"x", "y"}
    fm.sync_flows("wifi", [FlowRecord("y", 0, None, 80)])
    assert {f.flow_id for f in fm.live_flows("wifi")} == {"y"}


def test_sliding_rate_window():
    r = SlidingRate(2.0)
    r.add(0.0, 1000)
    r.add(1.0, 1000)
    assert r.rate(1.5) == 1000
    assert r.rate(2.5) == 500
    assert r.rate(10) == 0
