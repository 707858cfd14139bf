"""Trace-driven evaluations.

* How often Wait-n-Migrate finishes within a wait-time, computed by exact
  integration over the trace timeline.
* Expected Wi-Fi disruptions for a signal corpus under different switching
  policies.
* Probing whether web content can be resumed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autoswitch import (
    AutoSwitch,
    DisconnectionModel,
    Network,
    PolicyConfig,
    SignalSample,
    disconnection_probability,
)
from .traffic_model import FlowRecord, PortCategory, TraceFormatError, iter_jsonl, open_text

INFINITY = math.inf


class EvalMode(str, Enum):
    DUAL_PATH = "dual_path"
    SINGLE_PATH = "single_path_special"


@dataclass(frozen=True)
class EvalConfig:
    """``switch_times`` replaces the uniform switch-time density with explicit instants."""

    wait_times: tuple[float, ...] = (1, 3, 10, 30, 100)
    mode: EvalMode = EvalMode.DUAL_PATH
    switch_times: tuple[float, ...] | None = None
    window: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", EvalMode(self.mode))
        object.__setattr__(self, "wait_times", tuple(float(w) for w in self.wait_times))
        if any(not (w >= 0) for w in self.wait_times):
            raise ValueError("wait times must be non-negative (inf allowed)")
        if self.window is not None and not self.window[0] < self.window[1]:
            raise ValueError("window must have positive length")


# interval helpers; interval lists are sorted, disjoint, half-open [a, b)


def merge_intervals(intervals: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[list[float]] = []
    for a, b in sorted((a, b) for a, b in intervals if b > a):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def measure(intervals: Sequence[tuple[float, float]]) -> float:
    return float(sum(b - a for a, b in intervals))


def clip(intervals: Sequence[tuple[float, float]], lo: float, hi: float) -> list[tuple[float, float]]:
    return [(max(a, lo), min(b, hi)) for a, b in intervals if min(b, hi) > max(a, lo)]


def intersection_measure(x: Sequence[tuple[float, float]], y: Sequence[tuple[float, float]]) -> float:
    i = j = 0
    total = 0.0
    while i < len(x) and j < len(y):
        lo = max(x[i][0], y[j][0])
        hi = min(x[i][1], y[j][1])
        if hi > lo:
            total += hi - lo
        if x[i][1] < y[j][1]:
            i += 1
        else:
            j += 1
    return total


def covers(intervals: Sequence[tuple[float, float]], t: float) -> bool:
    starts = [a for a, _ in intervals]
    k = np.searchsorted(starts, t, side="right") - 1
    return k >= 0 and t < intervals[k][1]


def _flow_intervals(flows: Iterable[FlowRecord]) -> dict[PortCategory, list[tuple[float, float]]]:
    by_cat: dict[PortCategory, list[tuple[float, float]]] = {}
    for f in flows:
        if not f.closed:
            raise ValueError(f"flow {f.flow_id} is still open; the curve needs a closed-flow trace")
        by_cat.setdefault(f.category, []).append((f.t_start, f.t_end))
    return by_cat


def trace_window(flows: Sequence[FlowRecord]) -> tuple[float, float]:
    return (min(f.t_start for f in flows), max(f.t_end for f in flows))


def _blocked_dual(spans: list[tuple[float, float]], wait: float) -> list[tuple[float, float]]:
    """Switch instants at which some flow would outlive ``wait``: the union of [s, e - w)."""
    return merge_intervals((s, e - wait) for s, e in spans)


def _single_path_failure(web: list[tuple[float, float]], spans: list[tuple[float, float]], wait: float, lo: float, hi: float) -> float:
    """Measure of requested switch times whose actual switch lands inside a live flow of ``spans``.

    The actual instant is the request time when no web flow is live, the end
    of the web busy period when it comes within ``wait``, else request + wait.
    """
    busy = merge_intervals(web)
    live = merge_intervals(spans)
    failed = 0.0
    # free time: the switch happens immediately
    free = []
    cursor = lo
    for a, b in clip(busy, lo, hi):
        if a > cursor:
            free.append((cursor, a))
        cursor = max(cursor, b)
    if cursor < hi:
        free.append((cursor, hi))
    failed += intersection_measure(free, live)
    for a, b in busy:
        a_c, b_c = max(a, lo), min(b, hi)
        if b_c <= a_c:
            continue
        # forced part [a, b - w): actual instant t + w
        forced = clip([(a, b - wait)], a_c, b_c)
        if forced:
            shifted = [(x + wait, y + wait) for x, y in forced]
            failed += intersection_measure(shifted, live)
        # drains in time: actual instant b
        lo_d = max(a_c, b - wait)
        if b_c > lo_d and covers(live, b):
            failed += b_c - lo_d
    return failed


def migration_success_curve(flows: Sequence[FlowRecord], cfg: EvalConfig = EvalConfig()) -> dict[float, dict[PortCategory, float]]:
    """Fraction of switch instants at which every flow of the category migrates cleanly.

    Dual path: a flow live at the switch instant t succeeds iff it ends by
    t + wait. Single path: the switch itself is deferred to the first moment
    with no web flow (at most ``wait``), and any flow live at that moment is
    disrupted.
    """
    flows = list(flows)
    if not flows:
        return {}
    by_cat = _flow_intervals(flows)
    lo, hi = cfg.window or trace_window(flows)
    if cfg.switch_times is not None:
        return {w: {c: _success_at(spans, by_cat, cfg.mode, w, cfg.switch_times, c) for c, spans in by_cat.items()} for w in cfg.wait_times}
    span = hi - lo
    curve: dict[float, dict[PortCategory, float]] = {}
    for w in cfg.wait_times:
        row = {}
        for cat, spans in by_cat.items():
            if cfg.mode == EvalMode.DUAL_PATH:
                failed = measure(clip(_blocked_dual(spans, w), lo, hi))
            else:
                failed = _single_path_failure(by_cat.get(PortCategory.WEB, []), spans, w, lo, hi)
            row[cat] = 1.0 - failed / span
        curve[w] = row
    return curve


def actual_switch_time(web_busy: Sequence[tuple[float, float]], t: float, wait: float) -> float:
    starts = [a for a, _ in web_busy]
    k = np.searchsorted(starts, t, side="right") - 1
    if k < 0 or t >= web_busy[k][1]:
        return t
    end = web_busy[k][1]
    return end if end - t <= wait else t + wait


def _success_at(spans, by_cat, mode, wait, times, cat) -> float:
    if not times:
        return float("nan")
    ok = 0
    if mode == EvalMode.DUAL_PATH:
        blocked = _blocked_dual(spans, wait)
        ok = sum(not covers(blocked, t) for t in times)
    else:
        busy = merge_intervals(by_cat.get(PortCategory.WEB, []))
        live = merge_intervals(spans)
        for t in times:
            tau = actual_switch_time(busy, t, wait)
            ok += not covers(live, tau)
    return ok / len(times)


def curve_rows(curve: Mapping[float, Mapping[PortCategory, float]]) -> list[dict]:
    rows = []
    for w in sorted(curve):
        for cat in sorted(curve[w], key=lambda c: c.value):
            rows.append({"wait_time_s": w, "category": cat.value, "success": curve[w][cat]})
    return rows


# expected disruptions


@dataclass
class Session:
    session_id: str
    samples: list[SignalSample]
    usage: list[tuple[float, float]] = field(default_factory=list)
    flows: list[FlowRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "usage": [list(u) for u in self.usage],
            "samples": [s.to_dict() for s in self.samples],
            "flows": [f.to_dict() for f in self.flows],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Session":
        return cls(
            session_id=str(d["session_id"]),
            samples=[SignalSample(float(s["t"]), float(s["rssi_dbm"]), s.get("ap_id"), bool(s.get("associated", True))) for s in d["samples"]],
            usage=[(float(a), float(b)) for a, b in d.get("usage", [])],
            flows=[FlowRecord.from_dict(f) for f in d.get("flows", [])],
        )


def read_sessions(path: str | Path) -> list[Session]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(Session.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise TraceFormatError(lineno, f"bad session: {exc}") from None
    return out


def write_sessions(path: str | Path, sessions: Iterable[Session]) -> None:
    with open_text(path, "w") as fh:
        for s in sessions:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class Policy:
    name: str
    wait_time: float | None = None

    @property
    def label(self) -> str:
        if self.name == "autoswitch":
            return f"autoswitch({self.wait_time:g})"
        return self.name


def parse_policy(text: str) -> Policy:
    """``wifi_only``, ``brute_force`` or ``autoswitch:<wait seconds>``."""
    name, _, arg = text.strip().partition(":")
    name = name.replace("-", "_")
    if name in ("wifi_only", "brute_force") and not arg:
        return Policy(name)
    if name in ("autoswitch", "wait_n_migrate"):
        wait = float(arg or 10)
        if wait < 0:
            raise ValueError("wait time must be non-negative")
        return Policy("autoswitch", wait)
    raise ValueError(f"unknown policy {text!r}")


def estimate_sum(probs: Iterable[float]) -> float:
    return float(sum(probs))


def estimate_any(probs: Iterable[float]) -> float:
    return 1.0 - float(np.prod([1.0 - p for p in probs]))


ESTIMATORS: dict[str, Callable[[Iterable[float]], float]] = {"sum": estimate_sum, "any": estimate_any}

DISRUPTABLE = (PortCategory.WEB, PortCategory.EMAIL, PortCategory.OTHER)


def _in_usage(usage: Sequence[tuple[float, float]], t: float) -> bool:
    return any(a <= t < b for a, b in usage)


def switch_events(samples: Sequence[SignalSample], cfg: PolicyConfig) -> list[tuple[float, Network]]:
    """(time, network switched to) for every switch the policy makes."""
    policy = AutoSwitch(cfg)
    return [(t, Network.CELLULAR if "cellular" in action.value.lower() else Network.WIFI) for t, action in policy.run(samples)]


def wifi_exposure(session: Session, cfg: PolicyConfig | None) -> list[int]:
    """Distinct 1 dBm bins seen during usage while the device was on Wi-Fi.

    ``cfg=None`` means the device never leaves Wi-Fi.
    """
    bins: set[int] = set()
    policy = AutoSwitch(cfg) if cfg is not None else None
    for s in session.samples:
        on_wifi = policy is None or policy.target == Network.WIFI
        if on_wifi and _in_usage(session.usage, s.t):
            bins.add(math.floor(s.rssi_dbm))
        if policy is not None:
            policy.observe(s)
    return sorted(bins)


def cut_events(session: Session, events: Sequence[tuple[float, Network]], wait: float) -> int:
    """Switch events at which some flow would still be live ``wait`` seconds later."""
    flows = [f for f in session.flows if f.category in DISRUPTABLE]
    count = 0
    for t, _ in events:
        if any(f.t_start <= t and (f.t_end is None or f.t_end > t + wait) for f in flows):
            count += 1
    return count


@dataclass
class DisruptionReport:
    estimator: str
    sessions: int
    totals: dict[str, float]
    per_session: list[dict] = field(default_factory=list)
    switches: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def expected_disruptions(
    sessions: Sequence[Session],
    model: DisconnectionModel,
    policies: Sequence[Policy | str] = ("wifi_only", "brute_force", "autoswitch:10", "autoswitch:30", "autoswitch:100"),
    cfg: PolicyConfig | None = None,
    estimator: str = "sum",
) -> DisruptionReport:
    """Expected number of Wi-Fi disruptions per policy, summed over sessions.

    Each session counts each visited 1 dBm bin once. Time on cellular
    contributes nothing. Brute-force switching adds one disruption per
    switch that cuts a live flow; Wait-n-Migrate only for switches where a
    flow outlives the wait-time and has to be terminated.
    """
    cfg = cfg or PolicyConfig()
    est = ESTIMATORS[estimator]
    pols = [parse_policy(p) if isinstance(p, str) else p for p in policies]
    totals = {p.label: 0.0 for p in pols}
    per_session = []
    switches = 0
    for session in sessions:
        base = est(disconnection_probability(model, b) for b in wifi_exposure(session, None))
        switched = est(disconnection_probability(model, b) for b in wifi_exposure(session, cfg))
        events = switch_events(session.samples, cfg)
        switches += len(events)
        row = {"session_id": session.session_id, "switches": len(events)}
        for p in pols:
            if p.name == "wifi_only":
                value = base
            elif p.name == "brute_force":
                value = switched + cut_events(session, events, 0.0)
            else:
                value = switched + cut_events(session, events, p.wait_time)
            row[p.label] = value
            totals[p.label] += value
        per_session.append(row)
    return DisruptionReport(estimator, len(sessions), totals, per_session, switches)


def reductions(report: DisruptionReport, baseline: str = "wifi_only") -> dict[str, float]:
    base = report.totals[baseline]
    return {k: (1.0 - v / base) if base else 0.0 for k, v in report.totals.items() if k != baseline}


# resume-capability probing


@dataclass
class ProbeVerdict:
    url: str
    group: str = ""
    supports_range: bool | None = None
    static: bool | None = None
    same_length: bool | None = None
    length_delta_fraction: float | None = None
    no_cache: bool | None = None
    lengths: list = field(default_factory=list)
    complete: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _no_cache(head) -> bool:
    if head is None:
        return False
    cc = (head.get("Cache-Control") or "").lower()
    pragma = (head.get("Pragma") or "").lower()
    return "no-cache" in cc or "no-store" in cc or "no-cache" in pragma


def probe_url(url: str, fetcher: Callable | None = None, group: str = "", **fetch_kwargs) -> ProbeVerdict:
    """Download ``url`` twice in full and once from the middle.

    ``fetcher(url, headers=...)`` must return an object with ``status``,
    ``body``, ``head`` and ``ok`` (see :func:`flowmigrate.netharness.client.fetch`).
    """
    if fetcher is None:
        from .netharness.client import fetch as fetcher
    v = ProbeVerdict(url=url, group=group)
    first = fetcher(url, **fetch_kwargs)
    if not first.ok:
        v.error = first.error or f"status {first.status}"
        return v
    v.no_cache = _no_cache(first.head)
    v.lengths.append(len(first.body))
    second = fetcher(url, **fetch_kwargs)
    if not second.ok:
        v.error = second.error or f"status {second.status}"
        return v
    v.no_cache = v.no_cache or _no_cache(second.head)
    len1, len2 = len(first.body), len(second.body)
    v.lengths.append(len2)
    v.static = first.body == second.body
    v.same_length = len1 == len2
    v.length_delta_fraction = abs(len1 - len2) / max(len1, len2) if max(len1, len2) else 0.0
    mid = len1 // 2
    extra = list(fetch_kwargs.pop("headers", ()))
    third = fetcher(url, headers=extra + [("Range", f"bytes={mid}-")], **fetch_kwargs)
    if third.status is None or third.error:
        v.error = third.error
        return v
    v.supports_range = bool(third.status == 206 and third.head is not None and third.head.content_range_start() == mid)
    v.complete = True
    return v


def length_delta_cdf(verdicts: Iterable[ProbeVerdict]) -> list[tuple[float, float]]:
    """Empirical CDF of length_delta_fraction as (value, fraction ≤ value) breakpoints."""
    values = sorted(v.length_delta_fraction for v in verdicts if v.length_delta_fraction is not None)
    n = len(values)
    points = []
    for i, x in enumerate(values):
        if i + 1 < n and values[i + 1] == x:
            continue
        points.append((x, (i + 1) / n))
    return points


def cdf_at(points: Sequence[tuple[float, float]], x: float) -> float:
    frac = 0.0
    for value, f in points:
        if value <= x:
            frac = f
        else:
            break
    return frac


def bucket_summary(verdicts: Iterable[ProbeVerdict]) -> dict[str, dict]:
    """Per-group shares of static, range-resumable, same-length, near-length and no-cache content."""
    groups: dict[str, list[ProbeVerdict]] = {}
    for v in verdicts:
        groups.setdefault(v.group or "all", []).append(v)
    out = {}
    for name, vs in sorted(groups.items()):
        done = [v for v in vs if v.complete]
        n = len(done)

        def share(pred):
            return sum(1 for v in done if pred(v)) / n if n else 0.0

        out[name] = {
            "count": len(vs),
            "complete": n,
            "static": share(lambda v: v.static),
            "supports_range": share(lambda v: v.supports_range),
            "static_supports_range": share(lambda v: v.static and v.supports_range),
            "same_length_dynamic": share(lambda v: v.same_length and not v.static),
            "within_1pct_dynamic": share(lambda v: not v.same_length and v.length_delta_fraction <= 0.01),
            "no_cache": share(lambda v: v.no_cache),
        }
    return out


# report output


def _finite(obj):
    # strict JSON has no Infinity; infinite wait times are written as "inf"
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {("inf" if isinstance(k, float) and math.isinf(k) else k): _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def write_json(path: str | Path | None, doc) -> str:
    text = json.dumps(_finite(doc), indent=2, sort_keys=True, default=_json_default, allow_nan=False)
    if path is not None:
        Path(path).write_text(text + "\n", encoding="utf-8")
    return text


def _json_default(obj):
    if isinstance(obj, Enum):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_csv(path: str | Path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
