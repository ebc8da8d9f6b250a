"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import signal
import sys
import time
from importlib import resources
from pathlib import Path

from .cluster import ClusterConfig, load_worker_profiles
from .domain import JobSpec, ResourceVector
from .errors import ConfigurationError, DomainError, EdgeOffloadError, ValidationError
from .node import ServerNode, WorkerNode, leader_request
from .protocol import Connection, Message, MessageType, b64encode
from .sim.cost import cost_table, format_cost_table
from .sim.engine import POLICIES, normalize_policy, run_scenario
from .sim.latency import rtt_stats
from .sim.scenario import load_scenario

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad input detected before any side effect."""


def _fixture(*parts: str):
    return resources.files("edgeoffload").joinpath("fixtures", *parts)


def _read_json(path_or_name: str, bundled_dir: str, what: str):
    """Parse a JSON file, or a bundled fixture when given a bare name."""
    path = Path(path_or_name)
    if path.exists():
        text, source = path.read_text(encoding="utf-8"), str(path)
    else:
        bundled = _fixture(bundled_dir, f"{path_or_name}.json")
        if not bundled.is_file():
            raise UsageError(f"{what}: no file or bundled fixture named {path_or_name!r}")
        text, source = bundled.read_text(encoding="utf-8"), path_or_name
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def parse_capacity(text: str) -> ResourceVector:
    """``gpus=1,cpu=4,mem=8192`` or a JSON object."""
    text = text.strip()
    try:
        if text.startswith("{"):
            return ResourceVector.from_dict(json.loads(text))
        fields = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, sep, value = part.partition("=")
            if not sep:
                raise UsageError(f"capacity entry {part!r} is not key=value")
            fields[key.strip()] = float(value)
        return ResourceVector.from_dict(fields)
    except (ValueError, DomainError) as exc:
        raise UsageError(f"--capacity: {exc}") from None


def _split(text: str) -> list:
    return [p.strip() for p in (text or "").split(",") if p.strip()]


# -- commands ------------------------------------------------------------------

def cmd_server(args) -> int:
    config = ClusterConfig()
    if args.config:
        try:
            config = ClusterConfig.from_dict(_read_json(args.config, "config", "--config"))
        except (TypeError, ConfigurationError, DomainError) as exc:
            raise UsageError(f"--config: {exc}") from None
    node = ServerNode(args.listen, args.state_dir, config, node_id=args.node_id)

    async def main():
        address = await node.start()
        print(f"server {node.node_id} listening on {address}", flush=True)
        await _run_until_signal(node)

    asyncio.run(main())
    return EXIT_OK


def cmd_worker(args) -> int:
    capacity = parse_capacity(args.capacity)
    try:
        profiles = load_worker_profiles(_read_json(args.profiles, "profiles", "--profiles"))
    except ConfigurationError as exc:
        raise UsageError(f"--profiles: {exc}") from None
    node = WorkerNode(
        _split(args.server), capacity, profiles, tags=_split(args.tags), listen=args.listen,
        worker_id=args.worker_id, seed=args.seed, heartbeat_period_s=args.heartbeat_period,
    )

    async def main():
        address = await node.start()
        print(f"worker {node.worker_id} listening on {address}", flush=True)
        await _run_until_signal(node)

    asyncio.run(main())
    return EXIT_OK


async def _run_until_signal(node) -> None:
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    runner = asyncio.create_task(node.serve_forever())
    waiter = asyncio.create_task(stop.wait())
    await asyncio.wait({runner, waiter}, return_when=asyncio.FIRST_COMPLETED)
    waiter.cancel()
    await node.stop()
    if runner.done() and not runner.cancelled() and runner.exception():
        raise runner.exception()


def cmd_submit(args) -> int:
    data = _read_json(args.job_file, "jobs", "--job-file")
    try:
        spec = JobSpec.from_dict(data)
    except (KeyError, TypeError, ValueError, EdgeOffloadError) as exc:
        raise UsageError(f"--job-file: {exc}") from None
    reply = asyncio.run(leader_request(_split(args.server), Message(MessageType.SUBMIT_JOB, {"job": spec.to_dict()}),
                                       args.timeout))
    if reply.type == MessageType.ERROR:
        print(f"error: {reply.payload.get('message')}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(reply.payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_offload(args) -> int:
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    try:
        data = Path(args.payload).read_bytes()
    except OSError as exc:
        raise UsageError(f"--payload: {exc}") from None
    servers = _split(args.server)
    if not servers:
        raise UsageError("--server is required")
    return asyncio.run(_offload(servers, args.model, data, args.repeat, args.timeout, args.quiet))


async def _offload(servers, model, data, repeat, timeout, quiet) -> int:
    payload = {"model_name": model, "data_b64": b64encode(data)}
    conn = None
    samples = []
    print("request  rtt_ms  worker  service_ms")
    try:
        for i in range(repeat):
            msg = Message(MessageType.OFFLOAD_REQUEST, payload)
            t0 = time.perf_counter()
            if conn is None:
                conn = await _connect_leader(servers, timeout)
            try:
                reply = await conn.request(msg)
            except (OSError, asyncio.TimeoutError, EdgeOffloadError):
                # the server went away; find the leader again and resend once
                await conn.close()
                conn = await _connect_leader(servers, timeout)
                t0 = time.perf_counter()
                reply = await conn.request(msg)
            rtt = (time.perf_counter() - t0) * 1000.0
            if reply.type == MessageType.ERROR:
                print(f"error: {reply.payload.get('message')}", file=sys.stderr)
                return EXIT_RUNTIME
            samples.append(rtt)
            if not quiet:
                service = reply.payload.get("timings", {}).get("service_ms", float("nan"))
                print(f"{i + 1:7d}  {rtt:6.1f}  {reply.payload.get('worker_id', '?')}  {service:.1f}")
    finally:
        if conn is not None:
            await conn.close()
    stats = rtt_stats(samples)
    print(f"count={stats.count} mean_ms={stats.mean_ms:.3f} variance_ms2={stats.variance_ms2:.3f} "
          f"p95_ms={stats.p95_ms:.3f}")
    return EXIT_OK


async def _connect_leader(servers, timeout) -> Connection:
    """Open a connection to whichever server answers as leader."""
    last = None
    for addr in servers:
        try:
            conn = await Connection.open(addr, timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            last = exc
            continue
        probe = await conn.request(Message(MessageType.JOB_STATUS, {"job_id": None}))
        if probe.type == MessageType.ERROR and probe.payload.get("code") == "not_leader":
            await conn.close()
            last = probe.payload.get("message")
            continue
        return conn
    raise ConnectionError(f"no leader reachable among {servers}: {last}")


def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        policy = normalize_policy(args.policy) if args.policy else None
    except (ValidationError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None
    report = run_scenario(scenario, policy=policy, seed=args.seed)
    print(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8", newline="")
    return EXIT_OK


def cmd_cost(args) -> int:
    doc = _read_json(args.pricing, "pricing", "--pricing")
    if isinstance(doc, list):
        doc = {"rows": doc}
    if not isinstance(doc, dict) or not isinstance(doc.get("rows"), list):
        raise UsageError("--pricing: expected an object with a 'rows' list")
    unknown = set(doc) - {"rows", "month_hours", "description"}
    if unknown:
        raise UsageError(f"--pricing: unknown fields {sorted(unknown)}")
    month_hours = args.month_hours if args.month_hours is not None else doc.get("month_hours")
    try:
        rows = cost_table(doc["rows"], month_hours=month_hours)
    except (TypeError, ConfigurationError) as exc:
        raise UsageError(f"--pricing: {exc}") from None
    print(format_cost_table(rows))
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeoffload", description="Edge inference offload cluster tools")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("server", help="run the control-plane server")
    p.add_argument("--listen", default="127.0.0.1:7600", help="host:port to listen on")
    p.add_argument("--state-dir", required=True, help="directory for the lease and checkpoints")
    p.add_argument("--config", help="server config JSON (scheduler, heartbeat, lease settings)")
    p.add_argument("--node-id", help="identity used in the leader lease")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("worker", help="run a worker with the synthetic executor")
    p.add_argument("--server", required=True, help="comma-separated server addresses")
    p.add_argument("--capacity", required=True, help="e.g. gpus=1,cpu=4,mem=8192")
    p.add_argument("--tags", default="", help="comma-separated locality tags")
    p.add_argument("--profiles", required=True, help="profile JSON file or bundled name (e.g. onprem_gpu)")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port for server pushes and inference")
    p.add_argument("--worker-id")
    p.add_argument("--seed", type=int, default=0, help="seed for service-time jitter")
    p.add_argument("--heartbeat-period", type=float, help="seconds; defaults to the server's")
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("submit", help="submit a job")
    p.add_argument("--server", required=True)
    p.add_argument("--job-file", required=True)
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("offload", help="send inference requests and report round-trip times")
    p.add_argument("--server", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--payload", required=True, help="file sent as the request body")
    p.add_argument("--repeat", type=int, default=100)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--quiet", action="store_true", help="omit per-request lines")
    p.set_defaults(func=cmd_offload)

    p = sub.add_parser("simulate", help="run a scenario in virtual time")
    p.add_argument("--scenario", required=True, help="scenario JSON file or bundled name (e.g. ab_demo)")
    p.add_argument("--policy", help=f"one of {', '.join(POLICIES)}; defaults to the scenario's")
    p.add_argument("--seed", type=int, help="overrides the scenario seed")
    p.add_argument("--csv", help="write the report as CSV to this path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cost", help="monthly cost table")
    p.add_argument("--pricing", default="default", help="pricing JSON file or bundled name")
    p.add_argument("--month-hours", type=float, help="override the hours in a month")
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EdgeOffloadError, OSError, asyncio.TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
