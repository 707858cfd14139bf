"""Scripted link behaviour: outages, latency changes and Wi-Fi signal samples."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from ..autoswitch import SignalSample
from ..flow_manager import PathState
from ..traffic_model import TraceFormatError, iter_jsonl


class LinkEvent(str, Enum):
    UP = "up"
    DOWN = "down"
    LATENCY = "latency"
    RSSI = "rssi"


@dataclass(frozen=True)
class ScriptEvent:
    t: float
    path: str
    event: LinkEvent
    value: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "event", LinkEvent(self.event))
        if self.event in (LinkEvent.LATENCY, LinkEvent.RSSI) and self.value is None:
            raise ValueError(f"{self.event.value} event needs a value")
        if not math.isfinite(self.t) or self.t < 0:
            raise ValueError("event time must be finite and non-negative")

    def to_dict(self) -> dict:
        d = {"t": self.t, "path": self.path, "event": self.event.value}
        if self.value is not None:
            d["value"] = self.value
        return d


@dataclass
class LinkScript:
    events: list[ScriptEvent] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        for a, b in zip(self.events, self.events[1:]):
            if b.t < a.t:
                raise ValueError(f"script events out of order at t={b.t}")

    @property
    def duration(self) -> float:
        return self.events[-1].t if self.events else 0.0

    def paths(self) -> set[str]:
        return {e.path for e in self.events}

    def rssi_samples(self, path: str = "wifi") -> list[SignalSample]:
        return [_sample(e, None) for e in self.events if e.path == path and e.event == LinkEvent.RSSI]

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.events:
                fh.write(json.dumps(e.to_dict()) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "LinkScript":
        events = []
        last = -math.inf
        for lineno, obj in iter_jsonl(path):
            try:
                e = ScriptEvent(float(obj["t"]), str(obj["path"]), obj["event"], None if obj.get("value") is None else float(obj["value"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise TraceFormatError(lineno, f"bad script event: {exc}") from None
            if e.t < last:
                raise TraceFormatError(lineno, "script events out of time order")
            last = e.t
            events.append(e)
        return cls(events, name=Path(path).stem)


def _sample(e: ScriptEvent, associated: bool | None) -> SignalSample:
    return SignalSample(e.t, float(e.value), ap_id=e.path, associated=True if associated is None else associated)


@dataclass
class ExecutionRecord:
    applied: list[tuple[float, str, str, float | None]] = field(default_factory=list)
    samples: list[SignalSample] = field(default_factory=list)

    @property
    def rssi_events(self) -> int:
        return len(self.samples)


def run_script(paths: Mapping[str, object], script: LinkScript, clock, on_rssi: Callable[[SignalSample], None] | None = None) -> ExecutionRecord:
    """Schedule every script event on ``clock``.

    Events fire when the clock reaches them (instantly for a virtual clock
    being advanced, on timers for a real one). RSSI samples are marked
    disassociated while their path is down and passed to ``on_rssi``.
    Returns the record, which fills in as events fire.
    """
    record = ExecutionRecord()
    for e in script.events:
        if e.path not in paths:
            raise KeyError(f"script names unknown path {e.path!r}")

    def apply(e: ScriptEvent):
        path = paths[e.path]
        record.applied.append((e.t, e.path, e.event.value, e.value))
        if e.event == LinkEvent.DOWN:
            path.set_state(PathState.DOWN)
        elif e.event == LinkEvent.UP:
            path.set_state(PathState.UP)
        elif e.event == LinkEvent.LATENCY:
            path.latency_s = e.value / 1000.0
        else:
            sample = _sample(e, path.up)
            record.samples.append(sample)
            if on_rssi is not None:
                on_rssi(sample)

    for e in script.events:
        clock.schedule(e.t, lambda e=e: apply(e))
    return record


# presets

PRESETS = ("walk", "drive")


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")
    return Path(str(resources.files("flowmigrate") / "data" / "presets" / f"{name}.jsonl"))


def load_preset(name: str) -> LinkScript:
    script = LinkScript.read(preset_path(name))
    script.name = name
    return script


def _profile_events(rssi: Iterable[float], gap_below: float, path: str = "wifi") -> list[ScriptEvent]:
    """RSSI at 1 Hz; the path is down whenever the signal is below ``gap_below``."""
    events = []
    up = True
    for t, r in enumerate(rssi):
        r = float(round(r))
        if up and r < gap_below:
            events.append(ScriptEvent(float(t), path, LinkEvent.DOWN))
            up = False
        elif not up and r >= gap_below:
            events.append(ScriptEvent(float(t), path, LinkEvent.UP))
            up = True
        events.append(ScriptEvent(float(t), path, LinkEvent.RSSI, r))
    return events


def make_walk(seed: int = 3, duration: int = 600) -> LinkScript:
    """Pedestrian pace: good Wi-Fi with slow fades into short coverage holes (about 95% coverage)."""
    rng = np.random.default_rng(seed)
    rssi = []
    level = -58.0
    while len(rssi) < duration:
        for _ in range(int(rng.integers(80, 110))):
            rssi.append(level + rng.normal(0, 1.0))
        # fade out at ~2 dB/s, hold below coverage, recover
        r = level
        while r > -95:
            r -= 2.0
            rssi.append(r)
        for _ in range(int(rng.integers(3, 5))):
            rssi.append(-96.0)
        while r < level:
            r += 2.0
            rssi.append(r)
    return LinkScript(_profile_events(rssi[:duration], gap_below=-92), name="walk")


def make_drive(seed: int = 5, duration: int = 600) -> LinkScript:
    """Vehicle pace: deeper, faster drops between access points."""
    rng = np.random.default_rng(seed)
    rssi = []
    level = -60.0
    while len(rssi) < duration:
        for _ in range(int(rng.integers(40, 70))):
            rssi.append(level + rng.normal(0, 2.0))
        r = level
        while r > -97:
            r -= float(rng.uniform(6, 10))
            rssi.append(max(r, -97.0))
        for _ in range(int(rng.integers(4, 9))):
            rssi.append(-97.0)
        while r < level:
            r += 8.0
            rssi.append(min(r, level))
    return LinkScript(_profile_events(rssi[:duration], gap_below=-92), name="drive")


def write_presets(directory: str | Path | None = None) -> list[Path]:
    directory = Path(directory) if directory else Path(str(resources.files("flowmigrate") / "data" / "presets"))
    out = []
    for name, maker in (("walk", make_walk), ("drive", make_drive)):
        p = directory / f"{name}.jsonl"
        maker().write(p)
        out.append(p)
    return out
