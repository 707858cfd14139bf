"""Flow classification and flow statistics.

Flows are classified by destination port into web, email, push, other and
local buckets. Lifetime CDFs and concurrency histograms computed here feed
the lifetime predictor used by Wait-n-Migrate and the trace evaluations.
"""

from __future__ import annotations

import bisect
import gzip
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence


class PortCategory(str, Enum):
    WEB = "web"
    EMAIL = "email"
    PUSH = "push"
    OTHER = "other"
    LOCAL = "local"


WEB_PORTS = frozenset({80, 443})
EMAIL_PORTS = frozenset({143, 993, 110, 995, 25, 465})
PUSH_PORT = 5223

# Strata with fewer closed samples than this borrow the Other stratum.
MIN_STRATUM_SAMPLES = 20


def classify_port(dst_port: int, loopback: bool = False) -> PortCategory:
    """Map a destination port (plus loopback flag) to its category.

    Loopback destinations are always ``LOCAL`` regardless of port.
    """
    if not 0 <= dst_port <= 65535:
        raise ValueError(f"port out of range: {dst_port}")
    if loopback:
        return PortCategory.LOCAL
    if dst_port in WEB_PORTS:
        return PortCategory.WEB
    if dst_port in EMAIL_PORTS:
        return PortCategory.EMAIL
    if dst_port == PUSH_PORT:
        return PortCategory.PUSH
    return PortCategory.OTHER


class TraceFormatError(ValueError):
    """A trace file line failed schema validation."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class FlowRecord:
    """One observed TCP flow.

    ``t_end`` is None while the flow is still open. Lifetimes exclude the
    connection teardown phase; traces are expected to be recorded that way.
    """

    flow_id: str
    t_start: float
    t_end: float | None
    dst_port: int
    loopback: bool = False
    app: str = ""
    interactive: bool = False
    bytes: int = 0

    def __post_init__(self):
        if self.t_end is not None and self.t_end < self.t_start:
            raise ValueError(f"flow {self.flow_id}: t_end before t_start")
        if self.bytes < 0:
            raise ValueError(f"flow {self.flow_id}: negative byte count")
        if not 0 <= self.dst_port <= 65535:
            raise ValueError(f"flow {self.flow_id}: port out of range")

    @property
    def closed(self) -> bool:
        return self.t_end is not None

    @property
    def lifetime(self) -> float | None:
        if self.t_end is None:
            return None
        return self.t_end - self.t_start

    @property
    def category(self) -> PortCategory:
        return classify_port(self.dst_port, self.loopback)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FlowRecord":
        return cls(
            flow_id=str(data["flow_id"]),
            t_start=float(data["t_start"]),
            t_end=None if data.get("t_end") is None else float(data["t_end"]),
            dst_port=int(data["dst_port"]),
            loopback=bool(data.get("loopback", False)),
            app=str(data.get("app", "")),
            interactive=bool(data.get("interactive", False)),
            bytes=int(data.get("bytes", 0)),
        )


FLOW_FIELDS = ("flow_id", "t_start", "t_end", "dst_port", "loopback", "app", "interactive", "bytes")


def open_text(path: str | Path, mode: str = "r"):
    """Open a text file, transparently gzip-compressed when it ends in ``.gz``."""
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise TraceFormatError(lineno, "expected a JSON object")
            yield lineno, obj


def read_flows(path: str | Path) -> list[FlowRecord]:
    flows = []
    for lineno, obj in iter_jsonl(path):
        missing = [f for f in FLOW_FIELDS if f not in obj]
        if missing:
            raise TraceFormatError(lineno, f"missing fields {missing}")
        try:
            flows.append(FlowRecord.from_dict(obj))
        except (TypeError, ValueError) as exc:
            raise TraceFormatError(lineno, str(exc)) from None
    return flows


def write_flows(path: str | Path, flows: Iterable[FlowRecord]) -> None:
    with open_text(path, "w") as fh:
        for flow in flows:
            fh.write(json.dumps(flow.to_dict()) + "\n")


@dataclass(frozen=True)
class LifetimeCdf:
    """Empirical lifetime CDF for one (category, interactive) stratum.

    ``points`` holds ``(lifetime, cumulative_fraction)`` breakpoints with ties
    collapsed. ``censored`` counts flows with unknown (open) lifetimes; they
    enter the denominator but never the numerator, so the final fraction is
    below 1.0 when censored flows are present.
    """

    points: tuple[tuple[float, float], ...]
    count: int
    censored: int = 0
    category: PortCategory | None = None
    interactive: bool | None = None

    @property
    def empty(self) -> bool:
        return self.count == 0

    @property
    def samples(self) -> int:
        """Number of closed flows behind the CDF."""
        return self.count - self.censored

    def cdf(self, x: float) -> float:
        """P(lifetime <= x)."""
        if x == math.inf and self.count:
            # nothing outlives infinity; censored mass is absorbed here
            return 1.0
        if not self.points:
            return 0.0
        idx = bisect.bisect_right([p[0] for p in self.points], x)
        return 0.0 if idx == 0 else self.points[idx - 1][1]

    def survival(self, x: float) -> float:
        """P(lifetime > x)."""
        if self.count == 0:
            return 0.0
        return 1.0 - self.cdf(x)


def _build_cdf(lifetimes: Sequence[float], censored: int = 0, **labels) -> LifetimeCdf:
    total = len(lifetimes) + censored
    if total == 0:
        return LifetimeCdf(points=(), count=0, **labels)
    ordered = sorted(lifetimes)
    points: list[tuple[float, float]] = []
    for rank, value in enumerate(ordered, 1):
        frac = rank / total
        if points and points[-1][0] == value:
            points[-1] = (value, frac)
        else:
            points.append((value, frac))
    return LifetimeCdf(points=tuple(points), count=total, censored=censored, **labels)


def lifetime_cdf(flows: Iterable[FlowRecord], category: PortCategory, interactive: bool) -> LifetimeCdf:
    """Empirical CDF of closed-flow lifetimes in one stratum.

    Open flows are skipped. An empty selection yields an empty CDF.
    """
    lifetimes = [
        f.lifetime
        for f in flows
        if f.closed and f.category == category and f.interactive == interactive
    ]
    return _build_cdf(lifetimes, category=category, interactive=interactive)


def build_prediction_cdfs(flows: Iterable[FlowRecord]) -> dict[tuple[PortCategory, bool], LifetimeCdf]:
    """Per-stratum CDFs for lifetime prediction.

    Unlike :func:`lifetime_cdf`, open flows are kept as censored samples that
    outlive every finite horizon.
    """
    closed: dict[tuple[PortCategory, bool], list[float]] = {}
    open_counts: dict[tuple[PortCategory, bool], int] = {}
    for f in flows:
        key = (f.category, f.interactive)
        if f.closed:
            closed.setdefault(key, []).append(f.lifetime)
        else:
            open_counts[key] = open_counts.get(key, 0) + 1
    keys = set(closed) | set(open_counts)
    return {
        key: _build_cdf(closed.get(key, []), open_counts.get(key, 0), category=key[0], interactive=key[1])
        for key in keys
    }


def concurrency_distribution(
    flows: Iterable[FlowRecord],
    exclude_push: bool = True,
    window: tuple[float, float] | None = None,
) -> dict[int, float]:
    """Fraction of observed time spent with exactly k concurrent flows.

    The observed window defaults to [earliest start, latest end]. Open flows
    run to the end of the window.
    """
    selected = [f for f in flows if not (exclude_push and f.category == PortCategory.PUSH)]
    if not selected:
        return {}
    if window is None:
        lo = min(f.t_start for f in selected)
        ends = [f.t_end for f in selected if f.t_end is not None]
        hi = max(ends + [f.t_start for f in selected])
    else:
        lo, hi = window
    if hi <= lo:
        return {}
    events: list[tuple[float, int]] = []
    for f in selected:
        start = max(f.t_start, lo)
        end = hi if f.t_end is None else min(f.t_end, hi)
        if end > start:
            events.append((start, 1))
            events.append((end, -1))
    events.sort()
    durations: dict[int, float] = {}
    level = 0
    cursor = lo
    for t, delta in events:
        if t > cursor:
            durations[level] = durations.get(level, 0.0) + (t - cursor)
            cursor = t
        level += delta
    if hi > cursor:
        durations[level] = durations.get(level, 0.0) + (hi - cursor)
    span = hi - lo
    return {k: v / span for k, v in sorted(durations.items()) if v > 0}


def predict_long_lived(
    flow: FlowRecord,
    cdfs: Mapping[tuple[PortCategory, bool], LifetimeCdf],
    wait_time: float,
    threshold: float,
    now: float,
) -> bool:
    """Whether an open flow will probably outlive ``wait_time`` from ``now``.

    Evaluates P(L > elapsed + wait | L > elapsed) on the flow's stratum,
    falling back to the (Other, same interactivity) stratum when the own
    stratum is missing or thin. Push flows are always long lived.
    """
    category = flow.category
    if category == PortCategory.PUSH:
        return True
    cdf = cdfs.get((category, flow.interactive))
    if cdf is None or cdf.samples < MIN_STRATUM_SAMPLES:
        cdf = cdfs.get((PortCategory.OTHER, flow.interactive))
    if cdf is None or cdf.empty:
        return False
    elapsed = max(0.0, now - flow.t_start)
    alive = cdf.survival(elapsed)
    if alive <= 0.0:
        return False
    return cdf.survival(elapsed + wait_time) / alive >= threshold
