"""Seeded generators for the bundled flow trace and signal corpus.

The bundled files under ``flowmigrate/data`` are the output of these
functions with their default arguments; ``regenerate`` rewrites them.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .autoswitch import SignalSample
from .trace_engine import Session, read_sessions, write_sessions
from .traffic_model import FlowRecord, read_flows, write_flows

FLOW_TRACE = "synthetic_flows.jsonl"
SIGNAL_CORPUS = "synthetic_sessions.jsonl.gz"


def data_path(name: str) -> Path:
    return Path(str(resources.files("flowmigrate") / "data" / name))


def _lognormal(rng, median, sigma, size=None, cap=None):
    x = rng.lognormal(np.log(median), sigma, size)
    return np.minimum(x, cap) if cap is not None else x


def generate_flow_trace(seed: int = 7, hours: float = 3.0) -> list[FlowRecord]:
    """Flows from one phone: bursty web page loads, periodic mail, long push and a little else."""
    rng = np.random.default_rng(seed)
    horizon = hours * 3600.0
    flows: list[FlowRecord] = []
    n = 0

    def add(t0, life, port, app, interactive, nbytes):
        nonlocal n
        t_end = round(float(t0 + life), 6)
        flows.append(FlowRecord(f"f{n:06d}", round(float(t0), 6), t_end, port, False, app, interactive, int(nbytes)))
        n += 1

    # interactive browsing sessions, each a run of page loads
    t = float(rng.exponential(120))
    while t < horizon:
        session_end = t + float(rng.uniform(60, 600))
        while t < min(session_end, horizon):
            for _ in range(int(rng.integers(3, 16))):
                start = t + float(rng.exponential(0.4))
                life = float(_lognormal(rng, 1.2, 1.1, cap=240.0))
                add(start, max(life, 0.01), int(rng.choice([80, 443], p=[0.4, 0.6])), "browser", True, rng.integers(500, 400_000))
            t += float(rng.exponential(25))
        t = session_end + float(rng.exponential(300))
    # mail polls
    t = float(rng.uniform(0, 300))
    while t < horizon:
        add(t, float(_lognormal(rng, 15, 1.0, cap=900.0)), int(rng.choice([993, 143, 465])), "mail", bool(rng.random() < 0.2), rng.integers(2_000, 80_000))
        t += float(rng.uniform(240, 420))
    # push connection, reconnecting now and then
    t = 0.0
    while t < horizon:
        life = float(rng.uniform(900, 2400))
        add(t, life, 5223, "push", False, rng.integers(1_000, 20_000))
        t += life + float(rng.uniform(1, 20))
    # miscellaneous app traffic
    t = float(rng.exponential(60))
    while t < horizon:
        add(t, float(_lognormal(rng, 5, 1.5, cap=1200.0)), int(rng.integers(1024, 60000)), "app", bool(rng.random() < 0.5), rng.integers(100, 50_000))
        t += float(rng.exponential(90))
    flows.sort(key=lambda f: (f.t_start, f.flow_id))
    return flows


# signal corpus

def _rssi_walk(rng, levels: list[tuple[float, float]], noise: float, drift: float) -> np.ndarray:
    """1 Hz RSSI that ramps between (duration, level) plateaus with noise."""
    out = []
    current = levels[0][1]
    for duration, level in levels:
        for _ in range(int(duration)):
            current += np.clip(level - current, -drift, drift)
            out.append(current + rng.normal(0, noise))
    return np.clip(np.array(out), -100, -30)


def _usage_and_flows(rng, session_id: str, length: float, share: float):
    usage = []
    flows = []
    t = float(rng.uniform(0, 60))
    k = 0
    while t < length:
        end = min(length, t + float(rng.uniform(60, 300)))
        if rng.random() < share:
            usage.append((round(t, 3), round(end, 3)))
            u = t
            while u < end:
                for _ in range(int(rng.integers(2, 10))):
                    start = u + float(rng.exponential(0.3))
                    life = float(_lognormal(rng, 1.5, 1.0, cap=120.0))
                    flows.append(FlowRecord(f"{session_id}-{k}", round(start, 3), round(start + life, 3), 443, False, "browser", True, int(rng.integers(500, 200_000))))
                    k += 1
                u += float(rng.exponential(6))
        t = end + float(rng.uniform(10, 120))
    return usage, flows


SESSION_KINDS = ("stable", "fade", "hover", "edge", "fade", "edge")


def generate_signal_corpus(seed: int = 11, sessions: int = 48, hover_noise: float = 1.85, fade_drift: float = 6.0, kinds=SESSION_KINDS) -> list[Session]:
    """Usage sessions with Wi-Fi RSSI at 1 Hz.

    Session kinds: ``stable`` (strong signal throughout), ``fade`` (walks out
    of coverage and back), ``hover`` (sits near the switching threshold, so
    the policy switches without real need) and ``edge`` (slow drift to the
    unreliable region).
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(sessions):
        kind = kinds[i % len(kinds)]
        sid = f"s{i:03d}-{kind}"
        if kind == "stable":
            levels = [(1800, float(rng.uniform(-60, -45)))]
            noise, drift = 2.0, 1.0
        elif kind == "fade":
            deep = float(rng.uniform(-96, -86))
            levels = [(400, -55.0), (300, deep), (500, -58.0), (300, deep + float(rng.uniform(-3, 3))), (300, -55.0)]
            noise, drift = 1.5, float(rng.uniform(0.5, fade_drift))
        elif kind == "hover":
            levels = [(1800, float(rng.uniform(-75.5, -73.5)))]
            noise, drift = hover_noise, 1.0
        else:
            levels = [(600, -65.0), (600, float(rng.uniform(-84, -80))), (600, -66.0)]
            noise, drift = 1.5, 0.1
        rssi = _rssi_walk(rng, levels, noise, drift)
        samples = [SignalSample(float(t), float(round(r)), f"ap{i % 5}", bool(r > -95)) for t, r in enumerate(rssi)]
        usage, flows = _usage_and_flows(rng, sid, float(len(rssi)), share=0.8)
        out.append(Session(sid, samples, usage, flows))
    return out


def bundled_flow_trace() -> list[FlowRecord]:
    return read_flows(data_path(FLOW_TRACE))


def bundled_signal_corpus() -> list[Session]:
    return read_sessions(data_path(SIGNAL_CORPUS))


def regenerate(directory: str | Path | None = None) -> list[Path]:
    directory = Path(directory) if directory else data_path("")
    flows_path = directory / FLOW_TRACE
    sessions_path = directory / SIGNAL_CORPUS
    write_flows(flows_path, generate_flow_trace())
    write_sessions(sessions_path, generate_signal_corpus())
    return [flows_path, sessions_path]
