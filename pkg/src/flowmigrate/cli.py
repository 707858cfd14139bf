"""Command-line entry point: ``flowmigrate proxy|simulate|probe|analyze``.

Settings come from built-in defaults, then an INI file (``--config``), then
flags. Exit codes: 0 success, 1 usage or bad input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import signal
import sys
import threading
from dataclasses import fields
from pathlib import Path

from . import __version__
from .autoswitch import DisconnectionModel, ModelError, PolicyConfig, load_bundled_model, read_signal_trace
from .trace_engine import (
    ESTIMATORS,
    EvalConfig,
    EvalMode,
    Session,
    bucket_summary,
    curve_rows,
    expected_disruptions,
    length_delta_cdf,
    migration_success_curve,
    parse_policy,
    probe_url,
    read_sessions,
    reductions,
    write_csv,
    write_json,
)
from .traffic_model import TraceFormatError, build_prediction_cdfs, concurrency_distribution, read_flows

log = logging.getLogger("flowmigrate")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# config layering


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# section -> key -> (type, default). Defaults mirror the module defaults.
SETTINGS = {
    "proxy": {
        "listen_host": (str, "127.0.0.1"),
        "listen_port": (int, 8080),
        "max_retries": (int, 50),
        "chunk_bytes": (int, 2048),
        "overlap_bytes": (int, 4096),
        "max_offset_bytes": (int, 1024),
        "idle_timeout_s": (float, 5.0),
        "ignore_no_cache": (_bool, False),
        "workers": (int, 8),
        "log": (str, None),
    },
    "tls": {
        "ca_dir": (str, None),
        "cert_policy": (str, "deny"),
        "allow_list": (str, None),
        "tunnel_first_access": (_bool, False),
    },
    "policy": {
        "down_threshold_dbm": (float, -75.0),
        "down_hold_s": (float, 3.0),
        "up_threshold_dbm": (float, -70.0),
        "min_dwell_s": (float, 10.0),
    },
    "simulate": {
        "wait_times": (str, "1,3,10,30,100"),
        "mode": (str, "dual"),
        "interval_s": (float, 5.0),
        "estimator": (str, "sum"),
        "seed": (int, 1),
    },
    "probe": {
        "user_agent": (str, None),
    },
}


def load_config(path: str | Path | None) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    if path is None:
        return cp
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise UsageError(f"bad config {path}: {exc}") from None
    for section in cp.sections():
        if section not in SETTINGS:
            raise UsageError(f"{path}: unknown section [{section}]")
        for key in cp[section]:
            if key not in SETTINGS[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                SETTINGS[section][key][0](cp.get(section, key))
            except ValueError as exc:
                raise UsageError(f"{path}: [{section}] {key}: {exc}") from None
    return cp


def resolve(cp: configparser.ConfigParser, section: str, args: argparse.Namespace) -> dict:
    """Merged settings for one section: default < file < flag."""
    out = {}
    for key, (conv, default) in SETTINGS[section].items():
        value = default
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                value = conv(raw)
            except ValueError as exc:
                raise UsageError(f"[{section}] {key}: {exc}") from None
        flag = getattr(args, key, None)
        if flag is not None:
            value = flag
        out[key] = value
    return out


def policy_config(settings: dict) -> PolicyConfig:
    return PolicyConfig(**{f.name: settings[f.name] for f in fields(PolicyConfig)})


def parse_size(text: str) -> int:
    text = text.strip().lower().removesuffix("b").removesuffix("i")
    scale = {"k": 1 << 10, "m": 1 << 20, "g": 1 << 30}.get(text[-1:], 1)
    digits = text[:-1] if scale != 1 else text
    try:
        value = int(float(digits) * scale)
    except ValueError:
        raise ValueError(f"bad size {text!r}") from None
    if value <= 0:
        raise ValueError(f"size must be positive: {text!r}")
    return value


def parse_float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad number list {text!r}") from None


# proxy


def build_interceptor(tls: dict):
    from .tls import CertificatePolicy, Interceptor, LeafCertCache, cli_prompt, ensure_ca

    ca = ensure_ca(tls["ca_dir"])
    policy = CertificatePolicy(
        tls["cert_policy"],
        prompt=cli_prompt if tls["cert_policy"] == "prompt" else None,
        allow_list_path=tls["allow_list"],
    )
    return ca, Interceptor(ca, LeafCertCache(ca), policy=policy, tunnel_first_access=tls["tunnel_first_access"])


def cmd_proxy(args, cp) -> int:
    from .resumption.proxy import OutcomeLog, ProxyConfig, ResumptionProxy

    settings = resolve(cp, "proxy", args)
    tls = resolve(cp, "tls", args)
    interceptor = None
    if args.export_ca and not tls["ca_dir"]:
        raise UsageError("--export-ca needs --ca-dir")
    if tls["ca_dir"]:
        ca, interceptor = build_interceptor(tls)
        if args.export_ca:
            path = ca.export(args.export_ca)
            print(f"wrote root certificate to {path}", file=sys.stderr)
            if not args.serve:
                return EXIT_OK
    config = ProxyConfig(**{k: v for k, v in settings.items() if k != "log"})
    outcome_log = OutcomeLog(settings["log"] or sys.stdout)
    proxy = ResumptionProxy(config, interceptor=interceptor, outcome_log=outcome_log)
    stop = threading.Event()

    def on_signal(signum, _frame):
        log.info("signal %d: draining", signum)
        stop.set()

    previous = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        host, port = proxy.start()
        print(f"listening on {host}:{port}", file=sys.stderr, flush=True)
        while not stop.wait(0.5):
            pass
    except OSError as exc:
        print(f"proxy failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        proxy.shutdown()
        outcome_log.close()
        for s, h in previous.items():
            signal.signal(s, h)
    return EXIT_OK


# simulate


def _sessions_from(path: str, flows_path: str | None) -> list[Session]:
    """A session corpus, or a bare signal trace treated as one session in use throughout."""
    with_samples = False
    from .traffic_model import iter_jsonl

    for _, obj in iter_jsonl(path):
        with_samples = "samples" in obj
        break
    if with_samples:
        return read_sessions(path)
    samples = read_signal_trace(path)
    if not samples:
        return []
    flows = read_flows(flows_path) if flows_path else []
    return [Session(Path(path).stem, samples, [(samples[0].t, samples[-1].t + 1.0)], flows)]


def cmd_simulate(args, cp) -> int:
    sim = resolve(cp, "simulate", args)
    chosen = [bool(args.flows and not args.signals), bool(args.script), bool(args.signals)]
    if sum(chosen) != 1:
        raise UsageError("choose one of --flows, --script or --signals")
    if args.script:
        return _simulate_battery(args, cp, sim)
    if args.signals:
        return _simulate_policies(args, cp, sim)
    mode = {"dual": EvalMode.DUAL_PATH, "single": EvalMode.SINGLE_PATH}.get(sim["mode"], None)
    if mode is None:
        try:
            mode = EvalMode(sim["mode"])
        except ValueError:
            raise UsageError(f"unknown mode {sim['mode']!r}") from None
    cfg = EvalConfig(wait_times=parse_float_list(sim["wait_times"]), mode=mode)
    flows = read_flows(args.flows)
    rows = curve_rows(migration_success_curve(flows, cfg))
    if args.csv:
        write_csv(args.csv, rows)
    doc = {"flows": len(flows), "mode": mode.value, "curve": rows}
    _emit(args.out, doc, quiet=bool(args.csv) and not args.out)
    return EXIT_OK


def _simulate_policies(args, cp, sim) -> int:
    if sim["estimator"] not in ESTIMATORS:
        raise UsageError(f"unknown estimator {sim['estimator']!r}")
    model = DisconnectionModel.from_csv(args.model) if args.model else load_bundled_model()
    sessions = _sessions_from(args.signals, args.flows)
    try:
        policies = [parse_policy(p) for p in (args.policy or ["wifi_only", "brute_force", "autoswitch:10"])]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not any(p.name == "wifi_only" for p in policies):
        policies.insert(0, parse_policy("wifi_only"))
    report = expected_disruptions(sessions, model, policies, policy_config(resolve(cp, "policy", args)), sim["estimator"])
    doc = report.to_dict()
    doc["reductions"] = reductions(report)
    if not args.per_session:
        doc.pop("per_session")
    if args.csv:
        write_csv(args.csv, [{"policy": k, "expected_disruptions": v} for k, v in report.totals.items()])
    _emit(args.out, doc)
    return EXIT_OK


def _simulate_battery(args, cp, sim) -> int:
    from .netharness.battery import BatteryConfig, transfer_battery
    from .netharness.script import PRESETS, LinkScript, load_preset

    script = load_preset(args.script) if args.script in PRESETS else LinkScript.read(args.script)
    try:
        sizes = tuple(parse_size(s) for s in (args.battery or "10k,100k,1m").split(","))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = BatteryConfig(
        sizes=sizes,
        interval_s=sim["interval_s"],
        duration_s=args.duration,
        seed=sim["seed"],
        policy=policy_config(resolve(cp, "policy", args)),
    )
    result = transfer_battery(script, cfg)
    if args.csv:
        write_csv(args.csv, result.rows())
    doc = result.to_dict()
    if not args.per_transfer:
        doc.pop("results")
    _emit(args.out, doc)
    return EXIT_OK


# probe


def _read_urls(args) -> list[tuple[str, str]]:
    urls = [(u, "") for u in args.urls]
    if args.file:
        text = sys.stdin.read() if args.file == "-" else Path(args.file).read_text(encoding="utf-8")
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            # optional "<group> <url>"
            parts = line.split()
            urls.append((parts[-1], parts[0] if len(parts) > 1 else ""))
    return urls


def cmd_probe(args, cp) -> int:
    settings = resolve(cp, "probe", args)
    seed = args.seed if args.seed is not None else resolve(cp, "simulate", args)["seed"]
    verdicts = []
    origins = []
    try:
        targets = _read_urls(args)
        if args.fixtures:
            from .netharness.origin import Origin, fixture_profiles

            for name, profile in fixture_profiles(seed=seed).items():
                origin = Origin(profile)
                origins.append(origin)
                targets.append((origin.url(), name))
        for url, group in targets:
            try:
                verdicts.append(probe_url(url, group=group, user_agent=settings["user_agent"], timeout=args.timeout))
            except ValueError as exc:
                from .trace_engine import ProbeVerdict

                verdicts.append(ProbeVerdict(url=url, group=group, error=str(exc)))
    finally:
        for origin in origins:
            origin.close()
    lines = [json.dumps(v.to_dict(), sort_keys=True) for v in verdicts]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    else:
        for line in lines:
            print(line)
    if args.summary:
        summary = {"buckets": bucket_summary(verdicts), "length_delta_cdf": length_delta_cdf(verdicts)}
        write_json(args.summary, summary)
    return EXIT_OK


# analyze


def cmd_analyze(args, cp) -> int:
    from .synthetic import bundled_flow_trace

    flows = read_flows(args.flows) if args.flows else bundled_flow_trace()
    cdfs = build_prediction_cdfs(flows)
    strata = []
    for (category, interactive), cdf in sorted(cdfs.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
        row = {"category": category.value, "interactive": interactive, "count": cdf.count, "censored": cdf.censored}
        for w in parse_float_list(args.horizons):
            row[f"survival_{w:g}s"] = cdf.survival(w)
        strata.append(row)
    doc = {
        "flows": len(flows),
        "strata": strata,
        "concurrency": [{"flows": k, "fraction": v} for k, v in concurrency_distribution(flows).items()],
    }
    if args.csv:
        rows = []
        for (category, interactive), cdf in cdfs.items():
            rows.extend({"category": category.value, "interactive": interactive, "lifetime_s": x, "cdf": f} for x, f in cdf.points)
        write_csv(args.csv, rows)
    _emit(args.out, doc)
    return EXIT_OK


def _emit(path, doc, quiet: bool = False) -> None:
    text = write_json(path, doc)
    if path is None and not quiet:
        print(text)


# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowmigrate", description="Flow migration and download resumption tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI file with [proxy], [tls], [policy], [simulate], [probe] sections")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("proxy", help="run the resuming HTTP(S) proxy")
    p.add_argument("--host", dest="listen_host")
    p.add_argument("--port", dest="listen_port", type=int)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--chunk-bytes", type=int)
    p.add_argument("--overlap-bytes", type=int)
    p.add_argument("--max-offset-bytes", type=int)
    p.add_argument("--idle-timeout", dest="idle_timeout_s", type=float)
    p.add_argument("--ignore-no-cache", action="store_const", const=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--log", help="outcome log JSONL (default stdout)")
    p.add_argument("--ca-dir", help="CA store; enables HTTPS interception")
    p.add_argument("--export-ca", metavar="PEM", help="write the root certificate and exit (unless --serve)")
    p.add_argument("--serve", action="store_true", help="keep running after --export-ca")
    p.add_argument("--cert-policy", choices=("deny", "prompt", "allow_listed"))
    p.add_argument("--allow-list", help="JSON file of domains allowed despite bad certificates")
    p.add_argument("--tunnel-first-access", action="store_const", const=True)
    p.set_defaults(func=cmd_proxy)

    s = sub.add_parser("simulate", help="trace evaluations and harness runs")
    s.add_argument("--flows", help="flow trace JSONL: migration-success curve")
    s.add_argument("--wait-times", help="comma list of seconds (default 1,3,10,30,100)")
    s.add_argument("--mode", help="dual or single")
    s.add_argument("--signals", help="session corpus or signal trace: expected disruptions")
    s.add_argument("--model", help="disconnection model CSV (default bundled)")
    s.add_argument("--policy", action="append", help="wifi_only, brute_force or autoswitch:<wait>; repeatable")
    s.add_argument("--estimator", choices=tuple(ESTIMATORS))
    s.add_argument("--per-session", action="store_true")
    s.add_argument("--script", help="link script JSONL or preset name (walk, drive): transfer battery")
    s.add_argument("--battery", help="comma list of sizes, e.g. 10k,100k,1m")
    s.add_argument("--interval", dest="interval_s", type=float)
    s.add_argument("--duration", type=float, help="battery duration (default script length)")
    s.add_argument("--per-transfer", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--down-threshold", dest="down_threshold_dbm", type=float)
    s.add_argument("--down-hold", dest="down_hold_s", type=float)
    s.add_argument("--up-threshold", dest="up_threshold_dbm", type=float)
    s.add_argument("--min-dwell", dest="min_dwell_s", type=float)
    s.add_argument("--out", help="JSON report path (default stdout)")
    s.add_argument("--csv", help="CSV export path")
    s.set_defaults(func=cmd_simulate)

    pr = sub.add_parser("probe", help="check whether URLs can be resumed")
    pr.add_argument("urls", nargs="*")
    pr.add_argument("--file", help="file with one URL (or '<group> <url>') per line; '-' for stdin")
    pr.add_argument("--fixtures", action="store_true", help="also probe one local origin per behavior")
    pr.add_argument("--user-agent", help="mobile, desktop or a literal header value")
    pr.add_argument("--timeout", type=float, default=30.0)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out", help="verdict JSONL path (default stdout)")
    pr.add_argument("--summary", help="bucket summary and length-delta CDF JSON")
    pr.set_defaults(func=cmd_probe)

    a = sub.add_parser("analyze", help="flow lifetime and concurrency statistics")
    a.add_argument("--flows", help="flow trace JSONL (default bundled synthetic trace)")
    a.add_argument("--horizons", default="1,3,10,30,100", help="survival horizons in seconds")
    a.add_argument("--out")
    a.add_argument("--csv", help="CDF breakpoints CSV")
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cp = load_config(args.config)
        return args.func(args, cp)
    except (UsageError, TraceFormatError, ModelError, FileNotFoundError) as exc:
        print(f"flowmigrate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"flowmigrate: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, RuntimeError) as exc:
        print(f"flowmigrate: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
