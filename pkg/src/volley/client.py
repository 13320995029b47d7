"""Per-host client policy: runtime estimates, WRR simulation, scheduling, work fetch.

Everything here is pure policy over a :class:`ClientState`; the simulator owns
the clock, actual job progress and the RPC transport. Functions that decide
something worth tracing append a :class:`~volley.core.Record` to
``state.records``, which the caller drains.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .core import CPU, AllocationState, AppVersion, Host, Record, linear_bounded_update

DEFAULT_TIMESLICE = 3600.0
DEFAULT_CHECKPOINT_INTERVAL = 600.0
BACKOFF_BASE = 60.0
BACKOFF_CAP = 86400.0
BACKOFF_JITTER = 0.2
AVAILABILITY_HALF_LIFE = 10 * 86400.0
_EPS = 1e-9


# ---------------------------------------------------------------------------
# wire types


@dataclass
class ResourceRequest:
    req_runtime: float = 0.0  # seconds of work wanted
    req_idle: float = 0.0  # instances idle right now
    queue_dur: float = 0.0  # seconds of queued work already on this resource

    def __post_init__(self):
        if self.req_runtime < 0 or self.req_idle < 0 or self.queue_dur < 0:
            raise ValueError("work request fields must be >= 0")


@dataclass
class WorkRequest:
    resources: dict[str, ResourceRequest] = field(default_factory=dict)

    def wants_work(self) -> bool:
        return any(r.req_runtime > 0 or r.req_idle > 0 for r in self.resources.values())

    def fields(self) -> dict[str, float]:
        out = {}
        for kind, r in sorted(self.resources.items()):
            out[f"{kind}.req_runtime"] = r.req_runtime
            out[f"{kind}.req_idle"] = r.req_idle
            out[f"{kind}.queue_dur"] = r.queue_dur
        return out


# ---------------------------------------------------------------------------
# state


class RunState(enum.Enum):
    UNSTARTED = "unstarted"
    RUNNING = "running"
    SUSPENDED = "suspended_in_memory"
    PREEMPTED = "preempted"


@dataclass
class ClientJob:
    instance_id: int
    project: str
    version: AppVersion
    est_flop_count: float
    est_flops: float  # server-supplied projected FLOPS
    deadline: float
    delay_bound: float
    est_wss: float = 1e8
    job_id: int = 0
    fraction_done: float = 0.0
    elapsed: float = 0.0  # raw compute seconds so far
    state: RunState = RunState.UNSTARTED
    accurate_fraction: bool = False
    checkpoint_elapsed: float = 0.0
    checkpointed: bool = False
    slice_start: float = 0.0  # elapsed value when the current run began
    outcome: Any = None  # filled when the job finishes

    @property
    def usage(self) -> Mapping[str, float]:
        return self.version.resource_usage

    @property
    def static_seconds(self) -> float:
        return self.est_flop_count / self.est_flops

    @property
    def uses_gpu(self) -> bool:
        return not self.version.is_cpu_only

    def checkpoint(self) -> None:
        self.checkpoint_elapsed = self.elapsed
        self.checkpointed = True

    def advance(self, raw_seconds: float, true_runtime: float) -> None:
        """Record ``raw_seconds`` of compute toward a job that really needs ``true_runtime``."""
        self.elapsed += raw_seconds
        self.fraction_done = min(1.0, max(self.fraction_done, self.elapsed / true_runtime))


@dataclass
class ClientProject:
    name: str
    share: float = 1.0
    resources: frozenset[str] = frozenset({CPU})
    suspended: bool = False
    keyword_excluded: bool = False
    failures: int = 0
    next_rpc: float = 0.0
    allocation: AllocationState = field(default_factory=AllocationState)

    def backed_off(self, now: float) -> bool:
        return now < self.next_rpc


@dataclass
class ClientConfig:
    edf_enabled: bool = True
    timeslice: float = DEFAULT_TIMESLICE
    checkpoint_interval: float = DEFAULT_CHECKPOINT_INTERVAL
    leave_in_memory: bool = False
    report_margin: float = 0.1  # fraction of delay_bound
    report_batch: int = 8
    backoff_base: float = BACKOFF_BASE
    backoff_cap: float = BACKOFF_CAP
    backoff_jitter: float = BACKOFF_JITTER
    availability_half_life: float = AVAILABILITY_HALF_LIFE


@dataclass
class ClientState:
    host: Host
    projects: dict[str, ClientProject] = field(default_factory=dict)
    queue: list[ClientJob] = field(default_factory=list)
    availability: dict[str, float] = field(default_factory=dict)
    pending_reports: list[ClientJob] = field(default_factory=list)
    config: ClientConfig = field(default_factory=ClientConfig)
    rng: Any = None
    last_accounting: float = 0.0
    records: list[Record] = field(default_factory=list)

    def __post_init__(self):
        for r in self.host.resources:
            self.availability.setdefault(r.kind, 1.0)
        self.rebalance_rates()

    def rebalance_rates(self) -> None:
        total = sum(p.share for p in self.projects.values())
        for p in self.projects.values():
            a = p.allocation
            p.allocation = AllocationState(a.balance, p.share / total if total else 0.0, a.cap)

    def add_project(self, project: ClientProject) -> None:
        self.projects[project.name] = project
        self.rebalance_rates()

    def scale(self, job: ClientJob) -> float:
        """Fraction of wall time a job's resource actually computes."""
        a = self.availability.get(job.version.primary_kind, 1.0)
        return max(a, 1e-6) * self.host.prefs.throttle_duty_cycle

    def running(self) -> list[ClientJob]:
        return [j for j in self.queue if j.state is RunState.RUNNING]

    def kinds(self) -> list[str]:
        return [CPU] + sorted(r.kind for r in self.host.coprocessors)

    def instances(self, kind: str) -> int:
        return self.host.usable_instances(kind)

    def priority(self, project: str) -> float:
        return self.projects[project].allocation.balance


# ---------------------------------------------------------------------------
# estimation and feasibility


def estimate_remaining(job: ClientJob, scale: float = 1.0) -> float:
    """Estimated remaining scaled runtime of ``job``.

    Blends the dynamic estimate (from elapsed time and fraction done) with the
    static one, weighting the dynamic part by the fraction done.
    """
    static = job.static_seconds
    f = job.fraction_done
    if job.state is RunState.UNSTARTED and job.elapsed == 0:
        return static / scale
    if f <= 0:
        return max(0.0, static - job.elapsed) / scale if job.elapsed else static / scale
    dynamic = job.elapsed * (1.0 - f) / f
    if job.accurate_fraction:
        return dynamic / scale
    static_remaining = max(0.0, static - job.elapsed)
    return (f * dynamic + (1.0 - f) * static_remaining) / scale


class _Fit:
    """Incremental feasibility accumulator for greedy run-set construction."""

    __slots__ = ("host", "used", "cpu_only", "wss", "ram", "n_cpu")

    def __init__(self, host: Host):
        self.host = host
        self.used: dict[str, float] = {}
        self.cpu_only = 0.0
        self.wss = 0.0
        self.ram = host.available_ram()
        self.n_cpu = host.prefs.n_usable_cpus

    def fits(self, usage: Mapping[str, float], wss: float) -> bool:
        gpu = False
        for kind, u in usage.items():
            if kind == CPU:
                continue
            gpu = True
            r = self.host.resource(kind)
            if r is None or self.used.get(kind, 0.0) + u > r.instance_count + _EPS:
                return False
        cpu = usage.get(CPU, 0.0)
        if not gpu and self.cpu_only + cpu > self.n_cpu + _EPS:
            return False
        if self.used.get(CPU, 0.0) + cpu > self.n_cpu + 1 + _EPS:
            return False
        return self.wss + wss <= self.ram * (1 + _EPS)

    def add(self, usage: Mapping[str, float], wss: float) -> None:
        gpu = False
        for kind, u in usage.items():
            self.used[kind] = self.used.get(kind, 0.0) + u
            gpu = gpu or kind != CPU
        if not gpu:
            self.cpu_only += usage.get(CPU, 0.0)
        self.wss += wss


def feasible(jobs: Iterable[ClientJob], host: Host) -> bool:
    """Whether ``jobs`` can run together on ``host`` under its preferences."""
    fit = _Fit(host)
    for j in jobs:
        if not fit.fits(j.usage, j.est_wss):
            return False
        fit.add(j.usage, j.est_wss)
    return True


# ---------------------------------------------------------------------------
# WRR simulation


@dataclass
class WrrResult:
    miss_set: set[int]
    busy: dict[str, list[float]]  # T(A) per instance, seconds from now
    shortfall: dict[str, float]
    completion: dict[int, float]  # simulated completion offset per instance id
    idle_now: dict[str, int]


def _cost_weights(host: Host) -> tuple[dict[str, float], float]:
    cpu_peak = host.cpu.peak_flops_per_instance
    ratio = {r.kind: r.peak_flops_per_instance / cpu_peak for r in host.resources}
    ratio[CPU] = 1.0
    base = host.prefs.n_usable_cpus + sum(r.instance_count * ratio[r.kind] for r in host.coprocessors)
    return ratio, base


def wrr_simulate(state: ClientState, horizon: float | None = None, now: float = 0.0) -> WrrResult:
    """Simulate the queue under weighted round robin, event by event.

    Between completions the run set is fixed: jobs in order of project priority
    (ties by project name, then queue position) are added greedily while the
    set stays feasible. Priorities evolve by the linear-bounded rule with each
    project charged its resource-weighted usage.
    """
    host = state.host
    b_hi = host.prefs.buffer_hi_seconds
    horizon = math.inf if horizon is None else max(horizon, b_hi)
    kinds = state.kinds()
    n = {k: state.instances(k) for k in kinds}
    ratio, base = _cost_weights(host)

    rem: dict[int, float] = {}
    for idx, j in enumerate(state.queue):
        r = estimate_remaining(j, state.scale(j))
        if r > 0:
            rem[idx] = r
    balances = {p: proj.allocation for p, proj in state.projects.items()}
    busy = {k: [0.0] * n[k] for k in kinds}
    shortfall = {k: 0.0 for k in kinds}
    completion: dict[int, float] = {}
    miss: set[int] = set()
    idle_now: dict[str, int] | None = None
    usage_since = {p: 0.0 for p in balances}
    t = last = 0.0
    queue = state.queue

    while rem and t < horizon:
        # settle priorities for the interval since the previous decision
        for p, a in balances.items():
            balances[p] = linear_bounded_update(a, t - last, base, usage_since[p])
            usage_since[p] = 0.0
        last = t
        order = sorted(rem, key=lambda i: (-balances[queue[i].project].balance, queue[i].project, i))
        fit = _Fit(host)
        run = []
        for i in order:
            j = queue[i]
            if fit.fits(j.usage, j.est_wss):
                fit.add(j.usage, j.est_wss)
                run.append(i)
        if not run:
            break
        used = {k: 0.0 for k in kinds}
        for i in run:
            for k, u in queue[i].usage.items():
                used[k] = used.get(k, 0.0) + u
        if idle_now is None:
            idle_now = {k: max(0, math.floor(n[k] - used[k] + _EPS)) for k in kinds}
        dt = min(rem[i] for i in run)
        overlap = max(0.0, min(t + dt, b_hi) - t)
        for k in kinds:
            shortfall[k] += overlap * max(0.0, n[k] - used[k])
            for a in range(n[k]):
                busy[k][a] += dt * min(1.0, max(0.0, used[k] - a))
        for i in run:
            j = queue[i]
            usage_since[j.project] += dt * sum(u * ratio.get(k, 1.0) for k, u in j.usage.items())
            rem[i] -= dt
        t += dt
        for i in run:
            if rem[i] <= _EPS * max(1.0, t):
                del rem[i]
                j = queue[i]
                completion[j.instance_id] = t
                if now + t > j.deadline:
                    miss.add(j.instance_id)
    # nothing can run from here on: the rest of the window is idle
    for k in kinds:
        shortfall[k] += n[k] * max(0.0, b_hi - t)
    for i in rem:
        j = queue[i]
        if j.deadline <= now + horizon or math.isinf(horizon):
            miss.add(j.instance_id)
    if idle_now is None:
        idle_now = dict(n)
    return WrrResult(miss, busy, shortfall, completion, idle_now)


# ---------------------------------------------------------------------------
# allocation accounting


def account(state: ClientState, now: float, active: bool = True) -> None:
    """Charge running jobs for wall time since the last call and grow balances.

    With ``active=False`` (host off) the interval is skipped entirely.
    """
    elapsed = now - state.last_accounting
    state.last_accounting = now
    if elapsed <= 0 or not active:
        return
    ratio, base = _cost_weights(state.host)
    duty = state.host.prefs.throttle_duty_cycle
    usage = {p: 0.0 for p in state.projects}
    for j in state.running():
        usage[j.project] += elapsed * duty * sum(u * ratio.get(k, 1.0) for k, u in j.usage.items())
    for p, proj in state.projects.items():
        proj.allocation = linear_bounded_update(proj.allocation, elapsed * duty, base, usage[p])


def observe_availability(state: ClientState, fraction_on: float, elapsed: float) -> None:
    """Fold an observed on-fraction over ``elapsed`` seconds into the averages."""
    if elapsed <= 0:
        return
    keep = 0.5 ** (elapsed / state.config.availability_half_life)
    for kind in state.availability:
        state.availability[kind] = keep * state.availability[kind] + (1 - keep) * fraction_on


def throttle_compute_time(duty: float, start: float, end: float, period: float = 1.0) -> float:
    """Compute seconds in [start, end] under a square-wave throttle.

    Each period begins with ``duty * period`` seconds on, then sleeps.
    """
    if duty >= 1.0:
        return max(0.0, end - start)

    def on_until(t: float) -> float:
        full, rest = divmod(t, period)
        return full * duty * period + min(rest, duty * period)

    return max(0.0, on_until(end) - on_until(start))


# ---------------------------------------------------------------------------
# scheduling


@dataclass
class ScheduleResult:
    run: list[ClientJob]
    preempted: list[ClientJob]
    started: list[ClientJob]
    misses: set[int]


def _keeps_running(job: ClientJob, timeslice: float) -> bool:
    """Running and either mid-timeslice or not yet checkpointed in this run."""
    if job.state is not RunState.RUNNING:
        return False
    mid_slice = job.elapsed - job.slice_start < timeslice
    return mid_slice or job.checkpoint_elapsed <= job.slice_start


def priority_key(job: ClientJob, idx: int, state: ClientState, misses: set[int]):
    cfg = state.config
    missed = cfg.edf_enabled and job.instance_id in misses
    return (
        0 if missed else 1,
        job.deadline if missed else 0.0,
        0 if job.uses_gpu else 1,
        0 if _keeps_running(job, cfg.timeslice) else 1,
        -job.usage.get(CPU, 0.0),
        -state.priority(job.project),
        job.project,
        idx,
    )


def schedule(state: ClientState, now: float) -> ScheduleResult:
    """Choose the run set and preempt running jobs that fall out of it."""
    account(state, now)
    wrr = wrr_simulate(state, now=now)
    ranked = sorted(range(len(state.queue)),
                    key=lambda i: priority_key(state.queue[i], i, state, wrr.miss_set))
    fit = _Fit(state.host)
    chosen: list[ClientJob] = []
    for i in ranked:
        j = state.queue[i]
        if fit.fits(j.usage, j.est_wss):
            fit.add(j.usage, j.est_wss)
            chosen.append(j)
    chosen_ids = {j.instance_id for j in chosen}
    preempted, started = [], []
    for j in state.queue:
        if j.state is RunState.RUNNING and j.instance_id not in chosen_ids:
            if state.config.leave_in_memory:
                j.state = RunState.SUSPENDED
            else:
                # progress since the last checkpoint is lost
                if j.elapsed > 0:
                    j.fraction_done *= j.checkpoint_elapsed / j.elapsed
                j.elapsed = j.checkpoint_elapsed
                j.state = RunState.PREEMPTED
            preempted.append(j)
    for j in chosen:
        if j.state is not RunState.RUNNING:
            j.state = RunState.RUNNING
            j.slice_start = j.elapsed
            started.append(j)
    state.records.append(Record("sched_pass", {
        "host": state.host.id,
        "run": ",".join(str(j.instance_id) for j in sorted(chosen, key=lambda j: j.instance_id)) or "-",
        "preempted": len(preempted),
        "misses": len(wrr.miss_set),
    }))
    return ScheduleResult(chosen, preempted, started, wrr.miss_set)


def complete(state: ClientState, job: ClientJob, outcome: Any) -> None:
    """Move a finished job from the queue to the pending-report list."""
    state.queue.remove(job)
    job.outcome = outcome
    job.fraction_done = 1.0
    state.pending_reports.append(job)


# ---------------------------------------------------------------------------
# work fetch, backoff, reporting


def fetchable(project: ClientProject, kind: str, now: float) -> bool:
    return (not project.suspended and not project.keyword_excluded
            and not project.backed_off(now) and kind in project.resources)


def work_fetch(state: ClientState, now: float) -> tuple[str, WorkRequest] | None:
    """Pick a project and build a work request if some resource's buffer runs low."""
    b_lo = state.host.prefs.buffer_lo_seconds
    wrr = wrr_simulate(state, now=now)
    kinds = state.kinds()
    starving = [k for k in kinds if state.instances(k) and min(wrr.busy[k]) < b_lo]
    if not starving:
        return None
    order = sorted(state.projects.values(), key=lambda p: (-p.allocation.balance, p.name))
    chosen = None
    for kind in sorted(starving, key=lambda k: (k == CPU, k)):
        chosen = next((p for p in order if fetchable(p, kind, now)), None)
        if chosen is not None:
            break
    if chosen is None:
        return None
    req = WorkRequest()
    for kind in kinds:
        if not fetchable(chosen, kind, now):
            continue
        queue_dur = sum(estimate_remaining(j, state.scale(j)) for j in state.queue
                        if j.version.primary_kind == kind)
        req.resources[kind] = ResourceRequest(wrr.shortfall[kind], float(wrr.idle_now[kind]), queue_dur)
    state.records.append(Record("work_request", {"host": state.host.id, "project": chosen.name,
                                                 **req.fields()}))
    return chosen.name, req


def backoff_delay(count: int, rng, base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP,
                  jitter: float = BACKOFF_JITTER) -> float:
    """Delay after ``count`` consecutive failures: doubling from ``base``, capped, jittered."""
    raw = cap if count - 1 >= 64 else min(cap, base * 2 ** (count - 1))
    return raw * rng.uniform(1 - jitter, 1 + jitter)


def on_rpc_result(state: ClientState, project: str, success: bool, now: float) -> ClientState:
    proj = state.projects[project]
    if success:
        proj.failures = 0
        proj.next_rpc = now
        return state
    proj.failures += 1
    cfg = state.config
    delay = backoff_delay(proj.failures, state.rng, cfg.backoff_base, cfg.backoff_cap, cfg.backoff_jitter)
    proj.next_rpc = now + delay
    state.records.append(Record("backoff", {"host": state.host.id, "project": project,
                                            "count": proj.failures, "delay": delay}))
    return state


def report_policy(state: ClientState, now: float, rpc_pending: bool = False) -> list[ClientJob]:
    """Completed jobs to report now; they are removed from the pending list.

    Reports ride along with any RPC already being made, and otherwise wait
    until a deadline is near or enough of them pile up.
    """
    pending = state.pending_reports
    if not pending:
        return []
    cfg = state.config
    due = rpc_pending or len(pending) >= cfg.report_batch or any(
        j.deadline - now <= cfg.report_margin * j.delay_bound for j in pending)
    if not due:
        return []
    out = list(pending)
    pending.clear()
    for j in out:
        state.records.append(Record("report", {"host": state.host.id, "project": j.project,
                                               "inst": j.instance_id}))
    return out


def reports_by_project(jobs: Sequence[ClientJob]) -> dict[str, list[ClientJob]]:
    out: dict[str, list[ClientJob]] = {}
    for j in jobs:
        out.setdefault(j.project, []).append(j)
    return out
