"""AutoSwitch: RSSI hysteresis between Wi-Fi and cellular.

The policy leaves Wi-Fi once the signal has stayed at or below the down
threshold for the hold time, and returns when the signal reaches the up
threshold. The disconnection model maps RSSI to the probability that a
usage session at that level loses Wi-Fi connectivity.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .traffic_model import TraceFormatError, iter_jsonl


class Network(str, Enum):
    WIFI = "wifi"
    CELLULAR = "cellular"


class Action(str, Enum):
    NONE = "none"
    SWITCH_TO_CELLULAR = "switch_to_cellular"
    SWITCH_TO_WIFI = "switch_to_wifi"


class OutOfOrderSample(ValueError):
    pass


@dataclass(frozen=True)
class SignalSample:
    t: float
    rssi_dbm: float
    ap_id: str | None = None
    associated: bool = True

    def to_dict(self) -> dict:
        return {"t": self.t, "rssi_dbm": self.rssi_dbm, "ap_id": self.ap_id, "associated": self.associated}


@dataclass(frozen=True)
class PolicyConfig:
    down_threshold_dbm: float = -75.0
    down_hold_s: float = 3.0
    up_threshold_dbm: float = -70.0
    min_dwell_s: float = 10.0

    def __post_init__(self):
        if self.up_threshold_dbm <= self.down_threshold_dbm:
            raise ValueError("up threshold must exceed down threshold")
        if self.down_hold_s <= 0:
            raise ValueError("down_hold_s must be positive")
        if self.min_dwell_s < 0:
            raise ValueError("min_dwell_s must be non-negative")


@dataclass
class PolicyState:
    current_target: Network = Network.WIFI
    below_since: float | None = None
    last_switch: float = -math.inf
    last_t: float | None = None


def observe(state: PolicyState, cfg: PolicyConfig, sample: SignalSample) -> Action:
    """Advance the policy by one sample and return the resulting action.

    ``state`` is updated in place. Out-of-order samples raise
    :class:`OutOfOrderSample` and leave the state untouched. The dwell floor
    only gates the return to Wi-Fi; leaving Wi-Fi is never delayed.
    """
    if state.last_t is not None and sample.t < state.last_t:
        raise OutOfOrderSample(f"sample at t={sample.t} after t={state.last_t}")
    state.last_t = sample.t
    weak = (not sample.associated) or sample.rssi_dbm <= cfg.down_threshold_dbm

    if state.current_target == Network.WIFI:
        if not weak:
            state.below_since = None
            return Action.NONE
        if state.below_since is None:
            state.below_since = sample.t
        if sample.t - state.below_since >= cfg.down_hold_s:
            state.current_target = Network.CELLULAR
            state.below_since = None
            state.last_switch = sample.t
            return Action.SWITCH_TO_CELLULAR
        return Action.NONE

    good = sample.associated and sample.rssi_dbm >= cfg.up_threshold_dbm
    if good and sample.t - state.last_switch >= cfg.min_dwell_s:
        state.current_target = Network.WIFI
        state.below_since = None
        state.last_switch = sample.t
        return Action.SWITCH_TO_WIFI
    return Action.NONE


class AutoSwitch:
    """Stateful wrapper that feeds samples through :func:`observe`."""

    def __init__(self, cfg: PolicyConfig | None = None, start: Network = Network.WIFI):
        self.cfg = cfg or PolicyConfig()
        self.state = PolicyState(current_target=start)

    @property
    def target(self) -> Network:
        return self.state.current_target

    def observe(self, sample: SignalSample) -> Action:
        return observe(self.state, self.cfg, sample)

    def run(self, samples: Iterable[SignalSample]) -> list[tuple[float, Action]]:
        actions = []
        for s in samples:
            action = self.observe(s)
            if action != Action.NONE:
                actions.append((s.t, action))
        return actions


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DisconnectionModel:
    """Step function from 1 dBm RSSI bins (lower edges) to disconnection probability."""

    bins: tuple[int, ...]
    probabilities: tuple[float, ...]
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.bins:
            raise ModelError("model has no bins")
        if len(self.bins) != len(self.probabilities):
            raise ModelError("bins and probabilities differ in length")
        for a, b in zip(self.bins, self.bins[1:]):
            if b != a + 1:
                raise ModelError(f"bins must be contiguous 1 dBm steps, gap between {a} and {b}")
        for p in self.probabilities:
            if not 0.0 <= p <= 1.0:
                raise ModelError(f"probability {p} outside [0, 1]")
        for (ra, pa), (rb, pb) in zip(zip(self.bins, self.probabilities), zip(self.bins[1:], self.probabilities[1:])):
            if pb > pa:
                raise ModelError(f"probability rises from {ra} to {rb} dBm; model must not increase with RSSI")

    @classmethod
    def from_csv(cls, path: str | Path) -> "DisconnectionModel":
        bins, probs = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(reader.fieldnames) != {"rssi_dbm_bin", "probability"}:
                raise ModelError(f"{path}: expected header rssi_dbm_bin,probability")
            for lineno, row in enumerate(reader, 2):
                try:
                    bins.append(int(float(row["rssi_dbm_bin"])))
                    probs.append(float(row["probability"]))
                except (TypeError, ValueError):
                    raise ModelError(f"{path}: line {lineno}: bad row {row}") from None
        if bins != sorted(bins):
            raise ModelError(f"{path}: rows must be sorted ascending by rssi")
        return cls(tuple(bins), tuple(probs), source=str(path))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rssi_dbm_bin", "probability"])
            for b, p in zip(self.bins, self.probabilities):
                writer.writerow([b, p])

    def bin_of(self, rssi_dbm: float) -> int:
        b = math.floor(rssi_dbm)
        return min(max(b, self.bins[0]), self.bins[-1])


def disconnection_probability(model: DisconnectionModel, rssi_dbm: float) -> float:
    return model.probabilities[model.bin_of(rssi_dbm) - model.bins[0]]


def bundled_model_path() -> Path:
    return Path(str(resources.files("flowmigrate") / "data" / "disconnection_model.csv"))


def load_bundled_model() -> DisconnectionModel:
    return DisconnectionModel.from_csv(bundled_model_path())


def ping_disconnect_judge(outcomes: Sequence[bool], times: Sequence[float] | None = None, window_s: float = 5.0) -> bool:
    """True iff every ping in the window was lost.

    When probe ``times`` are given the window must span at least ``window_s``.
    """
    if len(outcomes) == 0:
        raise ValueError("empty ping window")
    if times is not None:
        if len(times) != len(outcomes):
            raise ValueError("times and outcomes differ in length")
        if max(times) - min(times) < window_s:
            raise ValueError(f"ping window covers less than {window_s} s")
    return not any(outcomes)


def read_signal_trace(path: str | Path) -> list[SignalSample]:
    samples = []
    last = -math.inf
    for lineno, obj in iter_jsonl(path):
        if "t" not in obj or "rssi_dbm" not in obj:
            raise TraceFormatError(lineno, "signal sample needs t and rssi_dbm")
        try:
            s = SignalSample(
                t=float(obj["t"]),
                rssi_dbm=float(obj["rssi_dbm"]),
                ap_id=obj.get("ap_id"),
                associated=bool(obj.get("associated", True)),
            )
        except (TypeError, ValueError) as exc:
            raise TraceFormatError(lineno, str(exc)) from None
        if s.t < last:
            raise TraceFormatError(lineno, "samples out of time order")
        last = s.t
        samples.append(s)
    return samples


def write_signal_trace(path: str | Path, samples: Iterable[SignalSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict()) + "\n")
