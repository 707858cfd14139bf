"""Wait-n-Migrate flow manager.

The manager owns the flow table and the set of network paths. A migration
pins new flows to the target path, lets flows on the old path drain until
their per-flow deadline, and terminates the stragglers (or, immediately,
flows predicted to outlive their wait). The single-path variant instead
looks for a moment with no live web flows inside an allowed window.

Paths are abstract: :class:`NetworkPath` is the adapter interface. The
harness ships a simulated implementation; privileged OS adapters (routing
table edits, RST injection, interface control) plug in the same way.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from .traffic_model import FlowRecord, PortCategory, classify_port

log = logging.getLogger(__name__)

BANDWIDTH_WINDOW_S = 2.0
DEFAULT_WAIT_S = 10.0
DEFAULT_SWITCH_LATENCY_S = 0.3


class PathState(str, Enum):
    UP = "up"
    DOWN = "down"
    DISABLED = "disabled"


class PathKind(str, Enum):
    WIFI = "wifi"
    CELLULAR = "cellular"
    SIMULATED = "simulated"


class PathError(Exception):
    pass


class PathUnavailable(PathError, ConnectionError):
    """Connection attempted on a path that is down or disabled."""


class UnknownPath(PathError, KeyError):
    pass


class NetworkPath:
    """A connectable network path.

    Subclasses implement :meth:`open_connection` and may override
    :meth:`apply_state`, which is where a real adapter would bring an
    interface up or down. The manager attaches itself via ``manager`` so that
    paths can report flow open/close/byte events.
    """

    def __init__(self, path_id: str, kind: PathKind | str = PathKind.SIMULATED):
        self.path_id = path_id
        self.kind = PathKind(kind)
        self._state = PathState.UP
        self.manager: "FlowManager | None" = None

    @property
    def state(self) -> PathState:
        return self._state

    @property
    def up(self) -> bool:
        return self._state == PathState.UP

    def set_state(self, state: PathState | str) -> None:
        state = PathState(state)
        if state != self._state:
            self._state = state
            self.apply_state(state)

    def apply_state(self, state: PathState) -> None:
        pass

    def open_connection(self, address, timeout: float | None = None, **kwargs):
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.path_id} {self.kind.value} {self._state.value}>"


class SlidingRate:
    """Bytes/s over a trailing time window."""

    def __init__(self, window: float = BANDWIDTH_WINDOW_S):
        self.window = window
        self._samples: deque[tuple[float, int]] = deque()

    def add(self, t: float, n: int) -> None:
        self._samples.append((t, n))
        self._trim(t)

    def _trim(self, now: float) -> None:
        while self._samples and self._samples[0][0] < now - self.window:
            self._samples.popleft()

    def rate(self, now: float) -> float:
        self._trim(now)
        return sum(n for _, n in self._samples) / self.window


@dataclass
class FlowEntry:
    flow_id: str
    path_id: str
    t_start: float
    dst_port: int
    destination: str = ""
    app: str = ""
    interactive: bool = False
    loopback: bool = False
    bytes: int = 0
    sever: Callable[[], None] | None = None
    rate: SlidingRate = field(default_factory=SlidingRate)
    terminated: bool = False

    @property
    def category(self) -> PortCategory:
        return classify_port(self.dst_port, self.loopback)

    def record(self) -> FlowRecord:
        return FlowRecord(
            flow_id=self.flow_id,
            t_start=self.t_start,
            t_end=None,
            dst_port=self.dst_port,
            loopback=self.loopback,
            app=self.app,
            interactive=self.interactive,
            bytes=self.bytes,
        )


class FlowTable:
    def __init__(self):
        self._flows: dict[str, FlowEntry] = {}

    def add(self, entry: FlowEntry) -> None:
        if entry.flow_id in self._flows:
            raise ValueError(f"duplicate flow id {entry.flow_id}")
        self._flows[entry.flow_id] = entry

    def pop(self, flow_id: str) -> FlowEntry | None:
        return self._flows.pop(flow_id, None)

    def get(self, flow_id: str) -> FlowEntry | None:
        return self._flows.get(flow_id)

    def on_path(self, path_id: str) -> list[FlowEntry]:
        return [f for f in self._flows.values() if f.path_id == path_id]

    def __iter__(self):
        return iter(list(self._flows.values()))

    def __len__(self):
        return len(self._flows)

    def __contains__(self, flow_id):
        return flow_id in self._flows


class Mode(str, Enum):
    DUAL_PATH = "dual_path"
    SINGLE_PATH = "single_path_special"


@dataclass
class Tallies:
    drained_naturally: int = 0
    force_terminated: int = 0
    migrated_clean: int = 0
    disrupted: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class TerminateFlow:
    flow_id: str


@dataclass(frozen=True)
class SwitchPath:
    path_id: str
    window_expired: bool


@dataclass(frozen=True)
class CompletePlan:
    from_path: str


@dataclass
class MigrationPlan:
    from_path: str | None
    to_path: str
    created: float
    mode: Mode
    deadlines: dict[str, float] = field(default_factory=dict)
    pending: set[str] = field(default_factory=set)
    initial: int = 0
    tallies: Tallies = field(default_factory=Tallies)
    completed_at: float | None = None
    window_end: float | None = None
    switched_at: float | None = None
    window_expired: bool = False

    @property
    def active(self) -> bool:
        return self.completed_at is None


WaitPolicy = Callable[[FlowRecord], float]


def constant_wait(seconds: float) -> WaitPolicy:
    return lambda record: seconds


def default_predictor(record: FlowRecord, wait_time: float, now: float) -> bool:
    # without lifetime statistics only push flows are known to be long lived
    return record.category == PortCategory.PUSH


class MigrationEventLog:
    """Collects migration events; optionally mirrors them to a JSONL file."""

    def __init__(self, path=None):
        self.events: list[dict] = []
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._lock = threading.Lock()

    def emit(self, t: float, event: str, path_id: str | None, flow_id: str | None = None, tallies: Tallies | None = None) -> None:
        entry = {"t": t, "event": event, "path_id": path_id}
        if flow_id is not None:
            entry["flow_id"] = flow_id
        if tallies is not None:
            entry["tallies"] = tallies.as_dict()
        with self._lock:
            self.events.append(entry)
            if self._fh:
                self._fh.write(json.dumps(entry) + "\n")
                self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


class FlowManager:
    """Coordinator for paths, flows and migration plans.

    ``clock`` needs only a ``now()`` method. ``predictor(record, wait, now)``
    returns True for flows that should be terminated right away when a
    migration begins.
    """

    def __init__(
        self,
        paths: Iterable[NetworkPath],
        primary: str | None = None,
        clock=None,
        predictor: Callable[[FlowRecord, float, float], bool] = default_predictor,
        event_log: MigrationEventLog | None = None,
        switch_latency_s: float = DEFAULT_SWITCH_LATENCY_S,
    ):
        self.paths: dict[str, NetworkPath] = {}
        for p in paths:
            self.paths[p.path_id] = p
            p.manager = self
        if not self.paths:
            raise ValueError("at least one path is required")
        self._primary = primary if primary is not None else next(iter(self.paths))
        if self._primary not in self.paths:
            raise UnknownPath(self._primary)
        self.clock = clock
        self.predictor = predictor
        self.events = event_log or MigrationEventLog()
        self.switch_latency_s = switch_latency_s
        self.table = FlowTable()
        self.plans: list[MigrationPlan] = []
        self.opened: dict[str, int] = {pid: 0 for pid in self.paths}
        self._subscribers: list[Callable[[str | None, str], None]] = []
        self._ids = itertools.count(1)
        self._lock = threading.RLock()

    def now(self) -> float:
        return self.clock.now() if self.clock is not None else 0.0

    # path selection

    @property
    def primary(self) -> str:
        return self._primary

    @property
    def primary_path(self) -> NetworkPath:
        return self.paths[self._primary]

    def path(self, path_id: str) -> NetworkPath:
        try:
            return self.paths[path_id]
        except KeyError:
            raise UnknownPath(path_id) from None

    def subscribe(self, callback: Callable[[str | None, str], None]) -> None:
        """Register ``callback(previous, new)`` for primary-path changes."""
        self._subscribers.append(callback)

    def set_primary(self, path_id: str) -> str:
        path = self.path(path_id)
        with self._lock:
            previous = self._primary
            if previous == path_id:
                return previous
            if not path.up:
                raise PathUnavailable(f"path {path_id} is {path.state.value}")
            self._primary = path_id
            self.events.emit(self.now(), "set_primary", path_id)
        for callback in list(self._subscribers):
            callback(previous, path_id)
        return previous

    def open_connection(self, address, **kwargs):
        """Open a connection on the current primary path."""
        with self._lock:
            path = self.primary_path
        return path.open_connection(address, **kwargs)

    # flow bookkeeping, called by paths and adapters

    def new_flow_id(self, path_id: str) -> str:
        return f"{path_id}-{next(self._ids)}"

    def register_flow(
        self,
        path_id: str,
        dst_port: int,
        destination: str = "",
        app: str = "",
        interactive: bool = False,
        loopback: bool = False,
        sever: Callable[[], None] | None = None,
        flow_id: str | None = None,
        t_start: float | None = None,
    ) -> str:
        with self._lock:
            flow_id = flow_id or self.new_flow_id(path_id)
            entry = FlowEntry(
                flow_id=flow_id,
                path_id=path_id,
                t_start=self.now() if t_start is None else t_start,
                dst_port=dst_port,
                destination=destination,
                app=app,
                interactive=interactive,
                loopback=loopback,
                sever=sever,
            )
            self.table.add(entry)
            self.opened[path_id] = self.opened.get(path_id, 0) + 1
            for plan in self.plans:
                if plan.active and plan.mode == Mode.DUAL_PATH and path_id == plan.to_path:
                    plan.tallies.migrated_clean += 1
            return flow_id

    def flow_bytes(self, flow_id: str, n: int) -> None:
        with self._lock:
            entry = self.table.get(flow_id)
            if entry is not None:
                entry.bytes += n
                entry.rate.add(self.now(), n)

    def flow_closed(self, flow_id: str, disrupted: bool = False) -> None:
        """A flow ended; ``disrupted`` marks an external cut (e.g. link loss)."""
        with self._lock:
            entry = self.table.pop(flow_id)
            if entry is None:
                return
            for plan in self.plans:
                if flow_id in plan.pending:
                    plan.pending.discard(flow_id)
                    if disrupted:
                        plan.tallies.disrupted += 1
                    else:
                        plan.tallies.drained_naturally += 1

    def bandwidth(self, flow_id: str) -> float:
        with self._lock:
            entry = self.table.get(flow_id)
            return entry.rate.rate(self.now()) if entry else 0.0

    def live_flows(self, path_id: str | None = None) -> list[FlowEntry]:
        with self._lock:
            if path_id is None:
                return list(self.table)
            return self.table.on_path(path_id)

    def sync_flows(self, path_id: str, snapshot: Iterable[FlowRecord]) -> None:
        """Polling-mode reconciliation against a netstat-style snapshot."""
        with self._lock:
            seen = set()
            for rec in snapshot:
                seen.add(rec.flow_id)
                if rec.flow_id not in self.table:
                    self.register_flow(
                        path_id, rec.dst_port, app=rec.app, interactive=rec.interactive,
                        loopback=rec.loopback, flow_id=rec.flow_id, t_start=rec.t_start,
                    )
            for entry in self.table.on_path(path_id):
                if entry.flow_id not in seen:
                    self.flow_closed(entry.flow_id)

    # termination

    def terminate_flow(self, flow_id: str) -> bool:
        """Abortively close a flow; returns False if there was nothing to do."""
        with self._lock:
            entry = self.table.get(flow_id)
            if entry is None:
                log.warning("terminate_flow: unknown or closed flow %s", flow_id)
                return False
            if entry.terminated:
                return False
            entry.terminated = True
            for plan in self.plans:
                if flow_id in plan.pending:
                    plan.pending.discard(flow_id)
                    plan.tallies.force_terminated += 1
            self.events.emit(self.now(), "terminate", entry.path_id, flow_id=flow_id)
            sever = entry.sever
            if sever is None:
                self.table.pop(flow_id)
        if sever is not None:
            sever()
            with self._lock:
                self.table.pop(flow_id)
        return True

    def disable_path(self, path_id: str) -> None:
        path = self.path(path_id)
        if path_id == self._primary:
            raise PathError(f"cannot disable primary path {path_id}; set another primary first")
        for entry in self.live_flows(path_id):
            self.terminate_flow(entry.flow_id)
        path.set_state(PathState.DISABLED)
        self.events.emit(self.now(), "disable", path_id)

    def enable_path(self, path_id: str) -> None:
        self.path(path_id).set_state(PathState.UP)

    # Wait-n-Migrate

    def begin_migration(self, to_path: str, wait_time: WaitPolicy | float = DEFAULT_WAIT_S) -> MigrationPlan:
        path = self.path(to_path)
        if not path.up:
            raise PathUnavailable(f"target path {to_path} is {path.state.value}")
        policy = wait_time if callable(wait_time) else constant_wait(float(wait_time))
        now = self.now()
        with self._lock:
            from_path = self._primary if self._primary != to_path else None
            self.set_primary(to_path)
            plan = MigrationPlan(from_path=from_path, to_path=to_path, created=now, mode=Mode.DUAL_PATH)
            old_flows = [f for f in self.table if f.path_id != to_path]
            plan.initial = len(old_flows)
            doomed = []
            for entry in old_flows:
                record = entry.record()
                wait = float(policy(record))
                if wait < 0:
                    raise ValueError("wait time must be non-negative")
                plan.deadlines[entry.flow_id] = now + wait
                plan.pending.add(entry.flow_id)
                if math.isfinite(wait) and self.predictor(record, wait, now):
                    doomed.append(entry.flow_id)
            self.plans.append(plan)
            self.events.emit(now, "begin", to_path, tallies=plan.tallies)
        for flow_id in doomed:
            self.terminate_flow(flow_id)
        with self._lock:
            if not plan.pending:
                self._complete(plan, now)
        return plan

    def _complete(self, plan: MigrationPlan, now: float) -> None:
        plan.completed_at = now
        self.events.emit(now, "complete", plan.from_path, tallies=plan.tallies)

    def tick(self, plan: MigrationPlan, now: float | None = None, apply: bool = True) -> list:
        """Advance a plan to ``now``; returns (and by default applies) actions."""
        now = self.now() if now is None else now
        if not plan.active:
            return []
        if plan.mode == Mode.SINGLE_PATH:
            return self._tick_single(plan, now, apply)
        with self._lock:
            due = sorted(fid for fid in plan.pending if plan.deadlines[fid] <= now)
        actions: list = [TerminateFlow(fid) for fid in due]
        if apply:
            for fid in due:
                self.terminate_flow(fid)
        with self._lock:
            if apply and not plan.pending and plan.active:
                self._complete(plan, now)
                actions.append(CompletePlan(plan.from_path))
            elif not apply and not (plan.pending - set(due)):
                actions.append(CompletePlan(plan.from_path))
        return actions

    def tick_all(self, now: float | None = None) -> list:
        actions = []
        for plan in list(self.plans):
            actions.extend(self.tick(plan, now))
        with self._lock:
            self.plans = [p for p in self.plans if p.active]
        return actions

    # single-path special case

    def single_path_switch(self, to_path: str, window: float, now: float | None = None) -> MigrationPlan:
        """Switch to ``to_path`` at the first moment with no live web flows.

        The switch happens immediately when no web flow is live; otherwise it
        is deferred to a later :meth:`tick`, at the latest at ``now + window``.
        Non-web flows are not waited for and are cut at the switch.
        """
        self.path(to_path)
        now = self.now() if now is None else now
        with self._lock:
            from_path = self._primary
            plan = MigrationPlan(from_path=from_path, to_path=to_path, created=now, mode=Mode.SINGLE_PATH, window_end=now + window)
            live = [f for f in self.table if f.path_id != to_path]
            plan.initial = len(live)
            plan.pending = {f.flow_id for f in live}
            self.plans.append(plan)
            self.events.emit(now, "begin", to_path, tallies=plan.tallies)
        self._tick_single(plan, now, apply=True)
        return plan

    def _web_live(self, plan: MigrationPlan) -> bool:
        with self._lock:
            return any(
                self.table.get(fid) is not None and self.table.get(fid).category == PortCategory.WEB
                for fid in plan.pending
            )

    def _tick_single(self, plan: MigrationPlan, now: float, apply: bool) -> list:
        if plan.switched_at is not None:
            return []
        expired = now >= plan.window_end
        if self._web_live(plan) and not expired:
            return []
        action = SwitchPath(plan.to_path, window_expired=expired and self._web_live(plan))
        if not apply:
            return [action]
        plan.window_expired = action.window_expired
        plan.switched_at = now
        with self._lock:
            victims = sorted(plan.pending)
        for fid in victims:
            entry = self.table.get(fid)
            if entry is None:
                continue
            with self._lock:
                plan.pending.discard(fid)
                plan.tallies.disrupted += 1
                entry.terminated = True
            if entry.sever is not None:
                entry.sever()
            with self._lock:
                self.table.pop(fid)
        old = plan.from_path
        target = self.path(plan.to_path)
        if old is not None and old != plan.to_path:
            self._primary_switch_single(old, target, now)
        with self._lock:
            self._complete(plan, now)
        return [action, CompletePlan(plan.from_path)]

    def _primary_switch_single(self, old: str, target: NetworkPath, now: float) -> None:
        # one radio: the old network goes away before the new one comes up
        with self._lock:
            self.paths[old].set_state(PathState.DISABLED)
            self.events.emit(now, "disable", old)

        def bring_up():
            target.set_state(PathState.UP)
            with self._lock:
                previous, self._primary = self._primary, target.path_id
                self.events.emit(self.now(), "set_primary", target.path_id)
            for callback in list(self._subscribers):
                callback(previous, target.path_id)

        if self.clock is not None and self.switch_latency_s > 0 and hasattr(self.clock, "schedule"):
            target.set_state(PathState.DOWN)
            self.clock.schedule(now + self.switch_latency_s, bring_up)
        else:
            bring_up()
