"""Command-line front end: simulation runs, the dispatch benchmark and report diffs."""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import random
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .client import ResourceRequest, WorkRequest
from .core import CPU, AppVersion, Compatibility, Host, JobSpec, ProcessingResource
from .server import (
    DispatchContext,
    JobCache,
    JobStore,
    RuntimeStats,
    ServerPolicy,
    feeder_fill,
    handle_request,
)
from .sim import ScenarioError, load_scenario, run
from .sim.scenario import canonical, digest

log = logging.getLogger("volley")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class InputError(Exception):
    """A user-supplied file is unreadable or malformed; the message names it."""


# ---------------------------------------------------------------------------
# run


def build_report(scenario, result, wall: float) -> dict:
    return {
        "scenario_digest": digest(scenario),
        "seed": scenario.seed,
        "metrics": result.metrics.flat(),
        "policy": canonical(scenario)["policy"],
        "trace_digest": result.trace_digest,
        "trace_lines": result.trace_lines,
        "events": result.events,
        "wall_seconds": wall,
    }


def cmd_run(config: str | Path, overrides: Sequence[str] = (), out_dir: str | Path = "out",
            trace_path: str | Path | None = None, seed: int | None = None) -> int:
    items = list(overrides)
    if seed is not None:
        items.append(f"seed={seed}")
    scenario = load_scenario(config, items)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %s seed=%d digest=%s", config, scenario.seed, digest(scenario)[:12])
    t0 = time.perf_counter()
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8", newline="\n") as sink:
            result = run(scenario, trace_sink=sink)
    else:
        result = run(scenario)
    wall = time.perf_counter() - t0
    (out / "metrics.txt").write_text(result.metrics.to_text())
    report = build_report(scenario, result, wall)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("done in %.2fs: %d events, trace %s", wall, result.events, result.trace_digest[:12])
    print(result.metrics.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench-dispatch


@dataclass
class BenchResult:
    dispatches: int
    requests: int
    seconds: float
    rate: float
    sequence_digest: str  # hash of the (host, job) dispatch order


def bench_dispatch(n_hosts: int = 1000, n_jobs: int = 100_000, secs: float = 5.0, seed: int = 1,
                   cache_size: int = 1000, max_dispatches: int | None = None) -> BenchResult:
    """Drive handle_request in a tight loop against a pre-filled store."""
    rng = random.Random(seed)
    version = AppVersion(1, "app", 1, {CPU: 1.0}, Compatibility(None, frozenset({CPU})))
    versions_by_app = {"app": [version]}
    hosts = [Host(i + 1, (ProcessingResource(CPU, 4, rng.uniform(1e9, 1e10)),)) for i in range(n_hosts)]
    store = JobStore()
    for _ in range(n_jobs):
        store.create_job(JobSpec("app", rng.uniform(1e12, 1e13), 1e14, 7 * 86400.0))
    cache = JobCache(cache_size)
    policy = ServerPolicy(cache_size=cache_size)
    stats = RuntimeStats()
    seq = hashlib.sha256()
    dispatches = requests = 0
    idle_passes = 0
    t0 = time.perf_counter()
    deadline = t0 + secs
    for i in itertools.count():
        if max_dispatches is not None and dispatches >= max_dispatches:
            break
        if n_hosts == 0 or time.perf_counter() >= deadline:
            break
        host = hosts[i % n_hosts]
        feeder_fill(cache, store)
        if cache.occupied() == 0:
            break
        request = WorkRequest({CPU: ResourceRequest(4 * 3600.0, 0.0, 0.0)})
        ctx = DispatchContext(host, request)
        reply = handle_request(ctx, cache, store, stats, versions_by_app, rng, float(i), policy)
        requests += 1
        for item in reply:
            seq.update(f"{host.id}:{item.job_id}\n".encode())
        dispatches += len(reply)
        idle_passes = 0 if reply else idle_passes + 1
        if idle_passes > n_hosts:
            break
    elapsed = time.perf_counter() - t0
    rate = dispatches / elapsed if dispatches and elapsed > 0 else 0.0
    return BenchResult(dispatches, requests, elapsed, rate, seq.hexdigest())


def cmd_bench_dispatch(n_hosts: int, n_jobs: int, secs: float, seed: int = 1) -> int:
    res = bench_dispatch(n_hosts, n_jobs, secs, seed)
    print(f"dispatches={res.dispatches} requests={res.requests} seconds={res.seconds:.3f} "
          f"rate={res.rate:.1f} sequence={res.sequence_digest[:16]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def _load_report(path: str | Path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    try:
        data = json.loads(p.read_text())
    except OSError as e:
        raise InputError(f"{p}: cannot read: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{p}: not a report: {e}") from None
    if not isinstance(data, dict) or not isinstance(data.get("metrics"), dict):
        raise InputError(f"{p}: metrics: missing")
    return data


@dataclass
class Delta:
    key: str
    a: float
    b: float

    @property
    def delta(self) -> float:
        return self.b - self.a

    @property
    def relative(self) -> float:
        if self.a == 0:
            return 0.0 if self.b == 0 else float("inf")
        return self.delta / abs(self.a)


def compare_reports(a: dict, b: dict) -> tuple[list[Delta], bool]:
    """Metric deltas (b minus a) and whether the scenario digests match."""
    ma, mb = a["metrics"], b["metrics"]
    rows = [Delta(k, float(ma.get(k, 0.0)), float(mb.get(k, 0.0))) for k in sorted(set(ma) | set(mb))]
    return rows, a.get("scenario_digest") == b.get("scenario_digest")


def cmd_compare(path_a: str | Path, path_b: str | Path) -> tuple[int, list[Delta]]:
    a, b = _load_report(path_a), _load_report(path_b)
    rows, same = compare_reports(a, b)
    if not same:
        print(f"warning: scenario digests differ ({str(a.get('scenario_digest'))[:12]} vs "
              f"{str(b.get('scenario_digest'))[:12]})", file=sys.stderr)
    width = max((len(r.key) for r in rows), default=3)
    print(f"{'metric':<{width}}  {'a':>14}  {'b':>14}  {'delta':>14}  {'rel':>9}")
    for r in rows:
        rel = "inf" if r.relative == float("inf") else f"{r.relative:+.2%}"
        print(f"{r.key:<{width}}  {r.a:>14.6g}  {r.b:>14.6g}  {r.delta:>+14.6g}  {rel:>9}")
    return EXIT_OK, rows


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volley", description="Volunteer computing scheduler simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("config")
    r.add_argument("--seed", type=int)
    r.add_argument("--trace", help="write the event trace to this file")
    r.add_argument("--out", default="out", help="directory for metrics.txt and report.json")
    r.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. policy.edf_enabled=false")

    b = sub.add_parser("bench-dispatch", help="measure the dispatch rate of the scheduler")
    b.add_argument("--hosts", type=int, default=1000)
    b.add_argument("--jobs", type=int, default=100_000)
    b.add_argument("--secs", type=float, default=5.0)
    b.add_argument("--seed", type=int, default=1)

    c = sub.add_parser("compare", help="diff two run reports")
    c.add_argument("a")
    c.add_argument("b")
    return p


def _setup_logging() -> None:
    level = os.environ.get("VOLLEY_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.overrides, args.out, args.trace, args.seed)
        if args.command == "bench-dispatch":
            return cmd_bench_dispatch(args.hosts, args.jobs, args.secs, args.seed)
        return cmd_compare(args.a, args.b)[0]
    except (ScenarioError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001 - report any runtime failure with an exit code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
