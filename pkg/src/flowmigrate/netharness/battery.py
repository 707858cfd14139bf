"""Repeated downloads over scripted links, with and without the migration stack."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

from ..autoswitch import Action, AutoSwitch, PolicyConfig
from ..flow_manager import FlowManager, PathError, PathKind
from ..resumption.proxy import ProxyConfig, ResumptionProxy
from .client import fetch
from .clock import VirtualClock
from .origin import Origin, OriginProfile
from .paths import SimulatedPath
from .script import LinkScript, run_script

log = logging.getLogger(__name__)

CONFIGURATIONS = ("no_policy", "policy_wnm", "policy_wnm_resumption")
DEFAULT_SIZES = (10 * 1024, 100 * 1024, 1 << 20)
WIFI_IP = "127.0.0.2"
CELLULAR_IP = "127.0.0.3"


@dataclass
class BatteryConfig:
    sizes: tuple[int, ...] = DEFAULT_SIZES
    interval_s: float = 5.0
    duration_s: float | None = None
    wait_time_s: float = 10.0
    tick_s: float = 0.1
    wifi_rate: int = 1 << 20
    cellular_rate: int = 256 << 10
    seed: int = 1
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    configurations: tuple[str, ...] = CONFIGURATIONS

    def __post_init__(self):
        unknown = set(self.configurations) - set(CONFIGURATIONS)
        if unknown:
            raise ValueError(f"unknown configurations {sorted(unknown)}")
        if self.interval_s <= 0:
            raise ValueError("interval must be positive")


@dataclass
class TransferResult:
    config: str
    size: int
    t_start: float
    t_end: float
    ok: bool
    status: int | None
    received: int
    error: str | None = None


@dataclass
class BatteryResult:
    script: str
    results: list[TransferResult] = field(default_factory=list)
    request_logs: dict = field(default_factory=dict)
    switches: dict = field(default_factory=dict)

    def table(self) -> dict[str, dict[int, dict]]:
        out: dict[str, dict[int, dict]] = {}
        for r in self.results:
            cell = out.setdefault(r.config, {}).setdefault(r.size, {"completed": 0, "total": 0})
            cell["total"] += 1
            cell["completed"] += int(r.ok)
        for row in out.values():
            for cell in row.values():
                cell["success"] = cell["completed"] / cell["total"] if cell["total"] else 0.0
        return out

    def success(self, config: str, size: int) -> float:
        return self.table()[config][size]["success"]

    def rows(self) -> list[dict]:
        rows = []
        for config, by_size in self.table().items():
            for size, cell in sorted(by_size.items()):
                rows.append({"config": config, "size": size, **cell})
        return rows

    def to_dict(self) -> dict:
        return {"script": self.script, "table": self.rows(), "switches": self.switches,
                "results": [asdict(r) for r in self.results]}


def _run_one(script: LinkScript, config: str, size: int, cfg: BatteryConfig):
    clock = VirtualClock()
    wifi = SimulatedPath("wifi", PathKind.WIFI, WIFI_IP, clock, rate=cfg.wifi_rate)
    cell = SimulatedPath("cellular", PathKind.CELLULAR, CELLULAR_IP, clock, rate=cfg.cellular_rate)
    fm = FlowManager([wifi, cell], primary="wifi", clock=clock)
    switches = []
    if config == "no_policy":
        on_rssi = None
        opener = wifi
    else:
        policy = AutoSwitch(cfg.policy)
        opener = fm

        def on_rssi(sample):
            action = policy.observe(sample)
            if action == Action.NONE:
                return
            target = "cellular" if action == Action.SWITCH_TO_CELLULAR else "wifi"
            try:
                fm.begin_migration(target, cfg.wait_time_s)
                switches.append((sample.t, target))
            except PathError as exc:
                log.debug("switch to %s refused: %s", target, exc)

        clock.every(cfg.tick_s, lambda t: fm.tick_all(t))
    run_script({"wifi": wifi, "cellular": cell}, script, clock, on_rssi)
    origin = Origin(OriginProfile("static_range", body_seed=cfg.seed, body_length=size), clock=clock)
    expected = hashlib.sha256(origin.body()).hexdigest()
    proxy = None
    if config == "policy_wnm_resumption":
        proxy = ResumptionProxy(ProxyConfig(listen_port=0, workers=1), selector=fm, clock=clock)
        proxy.start()
    duration = cfg.duration_s if cfg.duration_s is not None else script.duration
    results = []
    try:
        t = 0.0
        while t < duration:
            clock.advance_to(t)
            start = clock.now()
            if proxy is not None:
                r = fetch(origin.url(), proxy=proxy.address)
                proxy.wait_idle(30)
            else:
                r = fetch(origin.url(), opener=opener)
            ok = r.ok and r.sha256 == expected
            results.append(TransferResult(config, size, start, clock.now(), ok, r.status, len(r.body), r.error))
            t = max(t + cfg.interval_s, clock.now())
    finally:
        if proxy is not None:
            proxy.shutdown(grace_s=1)
        origin.close()
        clock.cancel_all()
        for c in wifi.connections() + cell.connections():
            c.close()
    return results, origin.log.deterministic_view(), switches


def transfer_battery(script: LinkScript, cfg: BatteryConfig | None = None) -> BatteryResult:
    """Download a file every ``interval_s`` for each size and configuration.

    Configurations: ``no_policy`` (plain Wi-Fi), ``policy_wnm`` (AutoSwitch
    moving new connections between paths via Wait-n-Migrate) and
    ``policy_wnm_resumption`` (the same, through the resuming proxy).
    A transfer succeeds when it completes without errors and byte-exact.
    """
    cfg = cfg or BatteryConfig()
    out = BatteryResult(script=script.name)
    for config in cfg.configurations:
        for size in cfg.sizes:
            results, reqlog, switches = _run_one(script, config, size, cfg)
            out.results.extend(results)
            out.request_logs[f"{config}/{size}"] = reqlog
            out.switches[f"{config}/{size}"] = len(switches)
    return out
