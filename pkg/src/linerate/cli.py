"""Command-line front end: run tests, schedule them, report, manage servers.

Every finished test lands in the append-only result store with its raw trace
and expanded methodology; `report` summarizes the store without ever pooling
scheduled and user-initiated results, since on-demand tests skew toward
moments when something already feels wrong.

Exit codes: 0 ok, 2 configuration problem, 3 no usable servers, 4 test
refused by the server, 5 target unreachable.
"""

import argparse
import logging
import os
import sys
import time
from datetime import datetime, timedelta

from . import coordinator, flowmodel, metrics, records, units
from .coordinator import (
    InfeasibleScheduleError,
    MultiDestFailedError,
    NoServersError,
    Schedule,
    ServerDescriptor,
    generate_schedule,
)
from .engine import Engine, RawTestRecord, TestRefusedError, TestSpec, UnreachableTargetError
from .metrics import METHOD_KINDS, STEADY_STATE, EstimationMethod, LatencyStats

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_SERVERS = 3
EXIT_REFUSED = 4
EXIT_UNREACHABLE = 5

DEFAULT_STORE = "~/.linerate/results.jsonl"
DEFAULT_REGISTRY = "~/.linerate/servers.jsonl"

SIMULATED_FLAG = "simulated"
SIMULATED_TARGET = "simulated:0"
SIMULATED_PROBES = 5


def parse_simulate_spec(text: str) -> dict:
    """Parse 'link=200mbps,rtt=20ms,loss=0[,connections=4][,duration=10]'.

    Only keys named in the string appear in the result (besides rtt and loss
    defaults); connection count and duration otherwise follow the normal run
    flags.
    """
    settings = {"rtt": 20.0, "loss": 0.0}
    seen = set()
    for part in text.split(","):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or not value.strip():
            raise ValueError(f"expected key=value, got {part!r}")
        if key in seen:
            raise ValueError(f"duplicate key {key!r}")
        seen.add(key)
        if key == "link":
            settings["link"] = units.parse_rate(value)
        elif key == "rtt":
            settings["rtt"] = units.parse_time_ms(value)
        elif key == "loss":
            loss = float(value)
            if not 0 <= loss < 1:
                raise ValueError(f"loss must be in [0, 1), got {value}")
            settings["loss"] = loss
        elif key == "connections":
            settings["connections"] = int(value)
        elif key == "duration":
            settings["duration"] = units.parse_time_ms(value) / 1000.0
        else:
            raise ValueError(f"unknown simulation key {key!r}")
    if "link" not in settings:
        raise ValueError("simulation needs link=<rate>")
    return settings


def simulated_raw(settings: dict, direction: str,
                  sample_interval: float = 100.0) -> RawTestRecord:
    """A test record synthesized from the fluid model instead of the network."""
    link = flowmodel.LinkModel(capacity=settings["link"], rtt=settings["rtt"],
                               loss_rate=settings["loss"])
    n = settings["connections"]
    aggregate = flowmodel.simulate_transfer(link, n, duration=settings["duration"],
                                            sample_interval=sample_interval)
    # The model's flows are symmetric, so the exact per-connection answer is
    # an equal split of the aggregate.
    per_connection = tuple(
        flowmodel.ThroughputTrace(
            sample_interval=sample_interval,
            samples=tuple((t, b / n) for t, b in aggregate.samples),
        )
        for _ in range(n)
    )
    spec = TestSpec(target=SIMULATED_TARGET, direction=direction,
                    duration=settings["duration"], n_connections=n,
                    sample_interval=sample_interval, target_id=SIMULATED_FLAG)
    flags = {SIMULATED_FLAG}
    if n < 4:
        flags.add("below_recommended_connections")
    return RawTestRecord(
        spec=spec,
        per_connection_traces=per_connection,
        aggregate_trace=aggregate,
        latency=LatencyStats(rtts=(settings["rtt"],) * SIMULATED_PROBES,
                             sent=SIMULATED_PROBES, received=SIMULATED_PROBES),
        cross_traffic_bps=0.0,
        flags=flags,
    )


def _format_optional_rate(bps) -> str:
    return units.format_rate(bps) if bps is not None else "-"


def emit_result(result: records.MeasurementResult, fmt: str, store_path: str,
                out=None):
    out = out or sys.stdout
    if fmt == "machine":
        print(result.to_json(), file=out)
        return
    report = result.report
    print(f"origin      {result.origin}", file=out)
    print(f"target      {result.spec.target}"
          + (f" ({result.spec.target_id})" if result.spec.target_id else ""), file=out)
    print(f"download    {_format_optional_rate(report.download_bps)}"
          f"   [{report.method.kind}]", file=out)
    print(f"upload      {_format_optional_rate(report.upload_bps)}", file=out)
    if report.latency_ms is not None:
        jitter = f"{report.jitter_ms:.2f} ms" if report.jitter_ms is not None else "-"
        print(f"latency     {report.latency_ms:.2f} ms median   jitter {jitter}   "
              f"probe loss {report.loss_rate:.1%}", file=out)
    others = ", ".join(f"{kind}={units.format_rate(bps)}"
                       for kind, bps in sorted(result.alternate_estimates.items()))
    print(f"estimates   {others}", file=out)
    if result.flags:
        print(f"flags       {', '.join(sorted(result.flags))}", file=out)
    print(f"stored      {store_path}", file=out)


def _record_outcome(registry_path: str, server_id: str, outcome: str):
    registry = records.load_registry(registry_path)
    try:
        registry.update_health(server_id, outcome)
    except KeyError:
        return  # server was removed from the file mid-run; nothing to update
    records.save_registry(registry_path, registry)


def _resolve_target(args):
    """(target, target_id, ServerDescriptor or None) from flags or registry."""
    if args.server:
        return args.server, "", None
    registry = records.load_registry(args.registry)
    pool = coordinator.candidate_pool(registry, args.location, args.candidates)
    chosen = coordinator.select_server(pool)
    return chosen.target, chosen.id, chosen


def _run_measured(args, origin: str) -> records.MeasurementResult:
    target, target_id, server = _resolve_target(args)
    spec = TestSpec(target=target, direction=args.direction, duration=args.duration,
                    n_connections=args.connections, sample_interval=args.interval,
                    target_id=target_id)
    engine = Engine()
    hint = server.capacity_hint if server else None
    try:
        raw = engine.run_test(spec, capacity_hint_bps=hint)
    except UnreachableTargetError:
        if server:
            _record_outcome(args.registry, server.id, coordinator.OUTCOME_UNREACHABLE)
        raise
    if server:
        _record_outcome(args.registry, server.id, coordinator.OUTCOME_OK)
    method = EstimationMethod(kind=args.method)
    return records.make_result(raw, method, origin, server=server)


def _simulate_settings(args) -> dict:
    settings = parse_simulate_spec(args.simulate)
    settings.setdefault("connections", args.connections)
    settings.setdefault("duration", args.duration)
    return settings


def cmd_run(args) -> int:
    store = records.ResultStore(args.store)
    if args.simulate:
        settings = _simulate_settings(args)
        raw = simulated_raw(settings, args.direction)
        method = EstimationMethod(kind=args.method)
        result = records.make_result(raw, method, records.ORIGIN_USER)
    else:
        result = _run_measured(args, records.ORIGIN_USER)
    store.append(result)
    emit_result(result, args.format, store.path)
    return EXIT_OK


def run_scheduled(schedule: Schedule, days: int, runner, now_fn=None,
                  sleep_fn=None, start_day=None) -> tuple[int, int]:
    """Fire runner(when) at each scheduled time for the given number of days.

    A firing whose time has already passed is logged and skipped, never
    back-filled: a made-up late measurement would say nothing about the time
    it claims to describe.  Returns (fired, missed).
    """
    now_fn = now_fn or datetime.now
    sleep_fn = sleep_fn or time.sleep
    start_day = start_day or now_fn().date()
    fired = missed = 0
    for offset in range(days):
        day = start_day + timedelta(days=offset)
        for when in generate_schedule(schedule, day):
            now = now_fn()
            if when < now:
                log.warning("missed firing at %s; skipped, not back-filled",
                            when.isoformat())
                missed += 1
                continue
            sleep_fn((when - now).total_seconds())
            runner(when)
            fired += 1
    return fired, missed


def cmd_schedule(args) -> int:
    window = tuple(args.peak_window.split("-"))
    if len(window) != 2:
        raise ValueError(f"peak window must look like 19:00-23:00, got {args.peak_window!r}")
    schedule = Schedule(tests_per_day=args.tests_per_day, peak_window=window,
                        fraction_peak=args.fraction_peak, seed=args.seed)
    # An impossible schedule must fail at startup, not at 19:00.
    generate_schedule(schedule, datetime.now().date(), test_duration_s=args.duration)

    store = records.ResultStore(args.store)
    method = EstimationMethod(kind=args.method)
    settings = _simulate_settings(args) if args.simulate else None

    def fire(when):
        try:
            if settings is not None:
                raw = simulated_raw(settings, args.direction)
                result = records.make_result(raw, method, records.ORIGIN_SCHEDULED)
            else:
                result = _run_measured(args, records.ORIGIN_SCHEDULED)
        except (NoServersError, TestRefusedError, UnreachableTargetError) as exc:
            log.warning("scheduled run at %s failed: %s", when.isoformat(), exc)
            return
        store.append(result)
        if args.format == "machine":
            print(result.to_json())
        else:
            headline = result.report.download_bps or result.report.upload_bps
            print(f"{when.isoformat()}  {_format_optional_rate(headline)}")

    fired, missed = run_scheduled(schedule, args.days, fire)
    print(f"fired {fired} of {fired + missed} scheduled runs over {args.days} day(s)")
    return EXIT_OK


def _format_summary(name: str, summary) -> str:
    if summary is None:
        return f"  {name:<14} (no data)"
    if name.endswith("_bps"):
        fmt = units.format_rate
    elif name == "loss_rate":
        fmt = lambda v: f"{v:.2%}"
    else:
        fmt = lambda v: f"{v:.2f} ms"
    return (f"  {name:<14} median {fmt(summary['median'])}   mean {fmt(summary['mean'])}"
            f"   p5 {fmt(summary['p5'])}   p95 {fmt(summary['p95'])}"
            f"   n={summary['count']}")


def cmd_report(args) -> int:
    results = records.ResultStore(args.store).load()
    if not results:
        print("result store is empty; nothing to report")
        return EXIT_OK
    blocks = records.report_blocks(results)
    if args.format == "machine":
        print(records.canonical_json([b.to_dict() for b in blocks]))
        return EXIT_OK
    for block in blocks:
        print(f"origin: {block.origin}   population {block.population}   "
              f"included {block.included}   excluded {block.population - block.included}")
        for flag, count in sorted(block.exclusions.items()):
            print(f"  excluded for {flag}: {count}")
        for name in records.THROUGHPUT_METRICS + records.QUALITY_METRICS:
            print(_format_summary(name, block.metrics[name]))
        kinds = ", ".join(m["kind"] for m in block.methodology["methods"])
        print(f"  methods: {kinds or '-'}")
    return EXIT_OK


def cmd_servers(args) -> int:
    registry = records.load_registry(args.registry)
    if args.servers_cmd == "list":
        if len(registry) == 0:
            print("registry is empty")
            return EXIT_OK
        for s in sorted(registry, key=lambda s: s.id):
            state = "removed" if s.removed else "ok"
            print(f"{s.id:<16} {s.target:<28} {s.declared_location or '-':<16} "
                  f"{s.network or '-':<10} health {s.health_score():.2f}  {state}")
        return EXIT_OK

    if args.servers_cmd == "add":
        host, _, port = args.target.rpartition(":")
        capacity = units.parse_rate(args.capacity) if args.capacity else None
        registry.add(ServerDescriptor(id=args.id, host=host, port=int(port),
                                      declared_location=args.location,
                                      network=args.network, capacity_hint=capacity))
        records.save_registry(args.registry, registry)
        print(f"added {args.id}")
        return EXIT_OK

    if args.servers_cmd == "remove":
        try:
            registry.remove(args.id)
        except KeyError:
            raise ValueError(f"no server with id {args.id!r}") from None
        records.save_registry(args.registry, registry)
        print(f"removed {args.id}")
        return EXIT_OK

    # probe: rank the candidate pool by measured RTT and persist the outcomes
    pool = coordinator.candidate_pool(registry, args.location, args.candidates)
    engine = Engine()
    outcomes = {}
    measured = {}

    def prober(server, count):
        try:
            stats = engine.probe_latency((server.host, server.port), count=count)
        except UnreachableTargetError:
            outcomes[server.id] = coordinator.OUTCOME_UNREACHABLE
            raise
        outcomes[server.id] = (coordinator.OUTCOME_OK if stats.received
                               else coordinator.OUTCOME_UNREACHABLE)
        measured[server.id] = stats
        return stats

    try:
        chosen = coordinator.select_server(pool, probes_per_candidate=args.probes,
                                           prober=prober)
    finally:
        for server_id, outcome in outcomes.items():
            registry.update_health(server_id, outcome)
        records.save_registry(args.registry, registry)
    for s in pool:
        stats = measured.get(s.id)
        rtt = f"{stats.median_rtt:.2f} ms" if stats and stats.received else "unreachable"
        marker = " <- selected" if s.id == chosen.id else ""
        print(f"{s.id:<16} {rtt}{marker}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    method = EstimationMethod()
    if args.destinations:
        caps = [units.parse_rate(c) for c in args.destinations.split(",")]
        access = units.parse_rate(args.access)
        per, agg = coordinator.simulate_destination_transfers(
            access, caps, rtt_ms=units.parse_time_ms(args.rtt),
            duration_s=args.duration, n_connections=args.connections)
        payload = {
            "access_bps": access,
            "destinations": [
                {"capacity_bps": cap,
                 "steady_state_bps": metrics.estimate_throughput(trace, method)}
                for cap, trace in zip(caps, per)
            ],
            "aggregate": metrics.all_estimates(agg, method),
        }
        if args.format == "machine":
            print(records.canonical_json(payload))
        else:
            for i, dest in enumerate(payload["destinations"]):
                print(f"destination {i}: cap {units.format_rate(dest['capacity_bps'])}"
                      f" -> {units.format_rate(dest['steady_state_bps'])}")
            print(f"aggregate: {units.format_rate(payload['aggregate'][STEADY_STATE])}"
                  f" (access {units.format_rate(access)})")
        return EXIT_OK

    link = flowmodel.LinkModel(capacity=units.parse_rate(args.link),
                               rtt=units.parse_time_ms(args.rtt),
                               loss_rate=args.loss)
    trace = flowmodel.simulate_transfer(link, args.connections, duration=args.duration)
    estimates = metrics.all_estimates(trace, method)
    if args.format == "machine":
        print(records.canonical_json(estimates))
    else:
        for kind in METHOD_KINDS:
            print(f"{kind:<14} {units.format_rate(estimates[kind])}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linerate",
        description="TCP throughput and latency measurement with open methods.")
    parser.add_argument("--store",
                        default=os.environ.get("LINERATE_STORE", DEFAULT_STORE),
                        help="result store path (env LINERATE_STORE)")
    parser.add_argument("--registry",
                        default=os.environ.get("LINERATE_REGISTRY", DEFAULT_REGISTRY),
                        help="server registry path (env LINERATE_REGISTRY)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_target_flags(p):
        p.add_argument("--server", default="", help="host:port, bypasses selection")
        p.add_argument("--location", default="", help="location hint for selection")
        p.add_argument("--candidates", type=int, default=3)
        p.add_argument("--direction", choices=("download", "upload"),
                       default="download")
        p.add_argument("--connections", type=int, default=4)
        p.add_argument("--duration", type=float, default=10.0, help="seconds")
        p.add_argument("--interval", type=float, default=100.0,
                       help="sample interval, ms")
        p.add_argument("--method", choices=METHOD_KINDS, default=STEADY_STATE)
        p.add_argument("--simulate", default="",
                       help="run against the fluid model: link=200mbps,rtt=20ms,loss=0")
        p.add_argument("--format", choices=("human", "machine"), default="human")

    run_p = sub.add_parser("run", help="run one test and store the result")
    add_target_flags(run_p)
    run_p.set_defaults(func=cmd_run)

    sched_p = sub.add_parser("schedule",
                             help="run tests at seeded random times each day")
    add_target_flags(sched_p)
    sched_p.add_argument("--tests-per-day", type=int, required=True)
    sched_p.add_argument("--fraction-peak", type=float, default=0.5)
    sched_p.add_argument("--peak-window", default="19:00-23:00")
    sched_p.add_argument("--seed", type=int, default=0)
    sched_p.add_argument("--days", type=int, default=1)
    sched_p.set_defaults(func=cmd_schedule)

    report_p = sub.add_parser("report", help="summarize the result store")
    report_p.add_argument("--format", choices=("human", "machine"), default="human")
    report_p.set_defaults(func=cmd_report)

    servers_p = sub.add_parser("servers", help="manage the server registry")
    servers_sub = servers_p.add_subparsers(dest="servers_cmd", required=True)
    servers_sub.add_parser("list")
    add_p = servers_sub.add_parser("add")
    add_p.add_argument("id")
    add_p.add_argument("target", help="host:port")
    add_p.add_argument("--location", default="")
    add_p.add_argument("--network", default="")
    add_p.add_argument("--capacity", default="", help="e.g. 1gbps")
    remove_p = servers_sub.add_parser("remove")
    remove_p.add_argument("id")
    probe_p = servers_sub.add_parser("probe")
    probe_p.add_argument("--location", default="")
    probe_p.add_argument("--candidates", type=int, default=3)
    probe_p.add_argument("--probes", type=int, default=5)
    servers_p.set_defaults(func=cmd_servers)

    sim_p = sub.add_parser("simulate", help="fluid-model estimates, no network")
    sim_p.add_argument("--link", default="", help="single-link capacity, e.g. 200mbps")
    sim_p.add_argument("--rtt", default="20ms")
    sim_p.add_argument("--loss", type=float, default=0.0)
    sim_p.add_argument("--connections", type=int, default=4)
    sim_p.add_argument("--duration", type=float, default=10.0)
    sim_p.add_argument("--access", default="", help="access capacity for multi-destination")
    sim_p.add_argument("--destinations", default="",
                       help="comma-separated destination caps, e.g. 400mbps,400mbps")
    sim_p.add_argument("--format", choices=("human", "machine"), default="human")
    sim_p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    for attr in ("store", "registry"):
        setattr(args, attr, os.path.expanduser(getattr(args, attr)))
    if args.command == "simulate" and not (args.link or args.destinations):
        print("error: simulate needs --link or --destinations", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "simulate" and args.destinations and not args.access:
        print("error: --destinations needs --access", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (InfeasibleScheduleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoServersError as exc:
        print(f"error: no usable servers: {exc}", file=sys.stderr)
        for server_id, reason in sorted(exc.reasons.items()):
            print(f"  {server_id}: {reason}", file=sys.stderr)
        return EXIT_NO_SERVERS
    except (TestRefusedError, MultiDestFailedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except UnreachableTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE


if __name__ == "__main__":
    sys.exit(main())
