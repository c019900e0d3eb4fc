"""Command line: ``sweepd run|client|backup|results``."""
from __future__ import annotations

import argparse
import contextlib
import fcntl
import logging
import shutil
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .client import Client, parse_client_args
from .config import ConfigError, ExperimentConfig
from .engine import Engine, EngineConfig, LocalEngine, SimEngine
from .results import (RESULTS_FILE, ResultTable, aggregate, filter_rows,
                      format_table, read_results)
from .server import (Server, ServerOptions, ServerState, SnapshotError,
                     parse_backup_args)
from .trace import Trace
from .workloads import build_tasks

log = logging.getLogger("sweepd")

LOCK_FILE = ".sweepd.lock"


class RunError(RuntimeError):
    pass


@dataclass
class RunReport:
    table: ResultTable
    output_dir: Path
    elapsed: float
    state: ServerState
    writer: str
    trace: Trace
    engine: Engine


@contextlib.contextmanager
def output_lock(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    with open(output_dir / LOCK_FILE, "w") as f:
        try:
            fcntl.flock(f, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise RunError(f"another run is using {output_dir}") from None
        try:
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)


def _clear_outputs(out: Path) -> None:
    for sub in ("clients", "snapshots", "instances"):
        shutil.rmtree(out / sub, ignore_errors=True)
    for name in (RESULTS_FILE, "results.meta.json"):
        (out / name).unlink(missing_ok=True)


def server_options(config: ExperimentConfig, result_titles=(), group_titles=()) -> ServerOptions:
    return ServerOptions(
        prefix=config.engine_config.prefix, output_dir=str(config.output_dir),
        min_group_size=config.min_group_size, backup_enabled=config.backup_enabled,
        health=config.health, backoff_base=config.backoff_base,
        backoff_cap=config.backoff_cap, max_clients=config.engine_config.max_clients,
        client_cpus=config.client_cpus, host=config.host, port=config.port,
        result_titles=tuple(result_titles), group_titles=tuple(group_titles))


def run_experiment(config: ExperimentConfig, tasks=None, result_titles=(),
                   group_titles=None, trace: Trace | None = None,
                   node_options: dict | None = None) -> RunReport:
    """Run one experiment to completion and return its results.

    ``tasks`` overrides the workload's task list.
    """
    out = Path(config.output_dir)
    with output_lock(out):
        _clear_outputs(out)
        if tasks is None:
            params = {k: v for k, v in config.workload.items() if k != "name"}
            tasks, result_titles = build_tasks(config.workload.get("name", "assignment"),
                                               **params)
        if group_titles is None:
            # groups share every parameter except the instance id
            group_titles = tuple(t for t in tasks[0].parameter_titles
                                 if t != "id") if tasks else ()
        options = server_options(config, result_titles, group_titles)
        trace = trace if trace is not None else Trace(config.trace)
        state = ServerState.initial(tasks, config.min_group_size)
        start = time.monotonic()
        if config.engine == "sim":
            sim = dict(config.sim)
            engine: Engine = SimEngine(config.engine_config, config.fault_triggers(), trace,
                                       boot_delay=sim.get("boot_delay"),
                                       min_create_interval=sim.get("min_create_interval", 0.0),
                                       node_options=node_options)
            server = Server(state, options, engine, trace=trace, faults=engine.faults)
            engine.register_primary(server)
        else:
            engine = LocalEngine(config.engine_config, out / "instances")
            name = f"{config.engine_config.prefix}-server-primary"
            server = Server(state, options, engine, name=name, trace=trace)
            threading.Thread(target=server.run, name=name, daemon=True).start()
        try:
            writer = _wait_for_results(engine, server, config.deadline, start)
        finally:
            engine.close()
            if config.engine == "local":
                server.kill()
                server.close()
        return RunReport(writer.results_table, out, time.monotonic() - start,
                         writer.state, writer.name, trace, engine)


def _servers(engine: Engine, first: Server) -> list[Server]:
    if isinstance(engine, SimEngine):
        with engine._lock:
            nodes = list(engine.nodes.values())
        return [n for n in nodes if isinstance(n, Server)]
    return [first]


def _wait_for_results(engine: Engine, server: Server, deadline: float | None,
                      start: float) -> Server:
    while True:
        for s in _servers(engine, server):
            if s.done.is_set() and not s.killed:
                return s
        if deadline is not None and time.monotonic() - start > deadline:
            raise RunError(f"no results after {deadline:.0f} s")
        if isinstance(engine, SimEngine) and not any(
                not s.killed for s in _servers(engine, server)) \
                and not _booting(engine):
            raise RunError("every server instance has stopped without results")
        time.sleep(0.05)


def _booting(engine: SimEngine) -> bool:
    with engine._lock:
        return any(h.kind == "server" and n not in engine.nodes and n not in engine.dead
                   for n, h in engine.handles.items())


# subcommands ---------------------------------------------------------------

def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.output_dir:
        config.output_dir = args.output_dir
    if args.engine:
        config.engine = args.engine
    if args.max_clients:
        config.engine_config = EngineConfig(**{**config.engine_config.__dict__,
                                               "max_clients": args.max_clients})
    if args.client_cpus:
        config.client_cpus = args.client_cpus
    if args.port is not None:
        config.port = args.port
    if args.min_group_size is not None:
        config.min_group_size = args.min_group_size
    if args.backup is not None:
        config.backup_enabled = args.backup
    if args.trace:
        config.trace = args.trace
    h = config.health
    if args.health_period:
        h.period = args.health_period
    if args.health_limit:
        h.limit = args.health_limit
    if args.max_non_active:
        h.max_non_active = args.max_non_active
    if h.limit <= h.period:
        raise ConfigError("health limit must exceed the health update period")
    return config


def cmd_run(args) -> int:
    try:
        config = _apply_overrides(ExperimentConfig.load(args.config), args)
        report = run_experiment(config)
    except (ConfigError, RunError) as exc:
        print(f"sweepd run: {exc}", file=sys.stderr)
        return 1
    counts = {st.value: n for st, n in report.state.counts().items() if n}
    print(f"{len(report.table.rows)} result rows written to "
          f"{report.output_dir / RESULTS_FILE} in {report.elapsed:.1f} s; "
          f"task states {counts}")
    return 0


def cmd_client(argv) -> int:
    opts = parse_client_args(argv)
    code = Client.from_args(opts).run()
    return 1 if code is None else code


def cmd_backup(argv) -> int:
    opts = parse_backup_args(argv)
    try:
        server = Server.from_snapshot_args(opts, engine=None)
    except SnapshotError as exc:
        print(f"sweepd backup: {exc}", file=sys.stderr)
        return 1
    if opts.engine_registry:
        cfg = EngineConfig(prefix=server.options.prefix,
                           max_clients=server.options.max_clients)
        server.engine = LocalEngine(cfg, opts.engine_registry)
    server.run()
    return 0 if server.state.results_written else 1


def cmd_results(args) -> int:
    out = Path(args.output_dir)
    if args.events is not None:
        return _show_events(out, args.events)
    try:
        table = read_results(out)
    except (OSError, ValueError) as exc:
        print(f"sweepd results: {exc}", file=sys.stderr)
        return 1
    where = {}
    for item in args.where or ():
        key, sep, value = item.partition("=")
        if not sep:
            print(f"sweepd results: --where expects TITLE=VALUE, got {item!r}",
                  file=sys.stderr)
            return 2
        where[key] = value
    try:
        if where:
            table = filter_rows(table, where)
    except KeyError as exc:
        print(f"sweepd results: {exc.args[0]}", file=sys.stderr)
        return 1
    if args.aggregate:
        table = aggregate(table)
    print(format_table(table))
    return 0


def _show_events(out: Path, client: str) -> int:
    root = out / "clients"
    folders = sorted(p for p in root.glob("*") if p.is_dir()) if root.exists() else []
    if client:
        folders = [p for p in folders if p.name == client]
    if not folders:
        print(f"sweepd results: no client events under {root}", file=sys.stderr)
        return 1
    for folder in folders:
        print(f"== {folder.name}")
        log_file = folder / "events.log"
        if log_file.exists():
            sys.stdout.write(log_file.read_text(encoding="utf-8"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sweepd", description="Run parameter sweeps on "
                                "elastic instances with pruning and failover.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--output-dir")
    run.add_argument("--engine", choices=("local", "sim"))
    run.add_argument("--max-clients", type=int)
    run.add_argument("--client-cpus", type=int)
    run.add_argument("--port", type=int)
    run.add_argument("--min-group-size", type=int)
    run.add_argument("--backup", action=argparse.BooleanOptionalAction, default=None)
    run.add_argument("--health-period", type=float)
    run.add_argument("--health-limit", type=float)
    run.add_argument("--max-non-active", type=float)
    run.add_argument("--trace", help="append a JSON-lines event trace here")

    sub.add_parser("client", help="run a client instance (spawned by the server)",
                   add_help=False)
    sub.add_parser("backup", help="run a backup server from a snapshot "
                   "(spawned by the server)", add_help=False)

    res = sub.add_parser("results", help="show results or client events")
    res.add_argument("output_dir")
    res.add_argument("--where", action="append", metavar="TITLE=VALUE")
    res.add_argument("--aggregate", action="store_true",
                     help="one row per group with mean result values")
    res.add_argument("--events", nargs="?", const="", default=None, metavar="CLIENT",
                     help="print client event logs instead")
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if argv and argv[0] == "client":
        return cmd_client(argv[1:])
    if argv and argv[0] == "backup":
        return cmd_backup(argv[1:])
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.INFO if args.verbose == 1 else logging.DEBUG)
    if args.command == "run":
        return cmd_run(args)
    return cmd_results(args)


if __name__ == "__main__":
    sys.exit(main())
