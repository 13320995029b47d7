"""Discrete-event engine wiring hosts, clients and project servers together.

Simulated time is kept in integer milliseconds. Every host draws from its own
RNG streams and every project server from its own, all split from the scenario
seed by hashing, so adding a host leaves the others' draws untouched.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import logging
import math
import random
from dataclasses import dataclass, field
from typing import IO

from .. import client as cl
from .. import lifecycle as lc
from ..core import (
    CPU,
    AppVersion,
    Compatibility,
    ComputingPrefs,
    HrLevel,
    Host,
    JobSpec,
    ProcessingResource,
    Reliability,
    ReliabilityProfile,
    Record,
    peak_flops_of,
)
from ..server import ProjectServer, ScoreWeights, ServerPolicy
from ..validation import BITWISE, Comparator
from .metrics import Collector, Metrics
from .scenario import ProjectSpec, Scenario
from .trace import Trace

log = logging.getLogger(__name__)

MS = 1000


def stream(seed: int, *labels) -> random.Random:
    """Independent RNG derived from ``seed`` and a label path."""
    key = ":".join(str(x) for x in (seed, *labels))
    return random.Random(int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big"))


def to_ms(seconds: float) -> int:
    return int(math.ceil(seconds * MS - 1e-6))


class EventKind(enum.IntEnum):
    HOST_ON = 0
    HOST_OFF = 1
    HOST_DEPARTED = 2
    JOB_COMPLETE = 3
    DEADLINE = 4
    RPC = 5
    FEEDER_TICK = 6
    CHECKPOINT_TICK = 7
    METRICS_TICK = 8
    BATCH_ARRIVAL = 9
    TIMESLICE = 10


# ---------------------------------------------------------------------------
# outcomes


@dataclass
class JobTruth:
    project: str
    job_id: int
    true_flop_count: float
    batch: int
    created_ms: int
    dispatched: bool = False

    @property
    def correct_digest(self) -> tuple:
        return (float(self.job_id), 0.0)


_wrong_ids = itertools.count(1)


def sample_outcome(profile: ReliabilityProfile, truth: JobTruth, runtime: float, rng,
                   collusion: bool = False, draw_ids=None) -> lc.Outcome:
    """Result of a finished execution: correct, wrong, or crashed.

    Wrong digests are unique per draw unless ``collusion`` is set, in which case
    every malicious host returns the same wrong digest for a given job.
    """
    if profile.crash_prob and rng.random() < profile.crash_prob:
        return lc.Outcome.error(runtime)
    if profile.wrong_prob and rng.random() < profile.wrong_prob:
        if collusion and profile.kind is Reliability.MALICIOUS:
            return lc.Outcome.ok((float(truth.job_id), -1.0), runtime)
        draw = next(draw_ids if draw_ids is not None else _wrong_ids)
        return lc.Outcome.ok((float(truth.job_id), float(draw)), runtime)
    return lc.Outcome.ok(truth.correct_digest, runtime)


# ---------------------------------------------------------------------------
# state


@dataclass
class SimHost:
    host: Host
    client: cl.ClientState
    rng: random.Random
    avail_rng: random.Random
    efficiency: dict[str, float]
    on: bool = True
    departed: bool = False
    changed_ms: int = 0
    tokens: dict[int, int] = field(default_factory=dict)
    run_since: dict[int, tuple[int, float]] = field(default_factory=dict)
    true_runtime: dict[int, float] = field(default_factory=dict)
    dispatched_ms: dict[int, int] = field(default_factory=dict)
    poll_token: int = 0

    def speed(self, version: AppVersion) -> float:
        return self.efficiency[version.primary_kind] * peak_flops_of(version, self.host)


@dataclass
class SimProject:
    spec: ProjectSpec
    server: ProjectServer
    versions: list[AppVersion]
    rng: random.Random
    batches: int = 0
    jobs_created: int = 0


@dataclass
class RunResult:
    metrics: Metrics
    trace_digest: str
    trace_lines: int
    events: int
    lines: list[str] | None = None


def reliability_classes(count: int, faulty: float, malicious: float, rng) -> list[Reliability]:
    """Exactly round(fraction * count) faulty and malicious hosts, placed at random."""
    n_faulty = round(faulty * count)
    n_malicious = min(count - n_faulty, round(malicious * count))
    classes = ([Reliability.FAULTY] * n_faulty + [Reliability.MALICIOUS] * n_malicious
               + [Reliability.HONEST] * (count - n_faulty - n_malicious))
    rng.shuffle(classes)
    return classes


def _weighted_choice(rng, mix: dict[str, float]) -> str:
    keys = sorted(mix)
    return rng.choices(keys, weights=[mix[k] for k in keys])[0]


class Simulation:
    def __init__(self, scenario: Scenario, trace_sink: IO[str] | None = None, keep_trace: bool = False):
        self.sc = scenario
        self.seed = scenario.seed
        self.trace = Trace(trace_sink, keep_trace)
        self.now_ms = 0
        self.end_ms = to_ms(scenario.duration_seconds)
        self.stop_ms = self.end_ms
        if scenario.drain:
            self.stop_ms += to_ms(max(p.delay_bound_seconds for p in scenario.projects)) + MS
        self._heap: list = []
        self._seq = itertools.count()
        self._draw_ids = itertools.count(1)
        self.collector = Collector(scenario.duration_seconds, scenario.warmup_seconds, scenario.warmup_jobs)
        self.truth: dict[tuple[str, int], JobTruth] = {}
        self.events = 0
        pol = scenario.policy
        self.client_config = cl.ClientConfig(
            edf_enabled=pol.edf_enabled, timeslice=pol.timeslice_seconds,
            checkpoint_interval=pol.checkpoint_seconds, leave_in_memory=pol.leave_in_memory,
            report_margin=pol.report_margin, report_batch=pol.report_batch)
        self.projects: dict[str, SimProject] = {}
        self._build_projects()
        self.hosts: list[SimHost] = []
        self._build_hosts()

    # construction ------------------------------------------------------------

    def _server_policy(self, size_classes: int) -> ServerPolicy:
        pol = self.sc.policy
        w = pol.score_weights
        comparator = Comparator.fuzzy(pol.fuzzy_tolerance) if pol.fuzzy_tolerance else BITWISE
        return ServerPolicy(
            score_weights=ScoreWeights(w.keyword, w.allocation, w.skipped, w.locality, w.size),
            hr_level=HrLevel(pol.hr_level), homogeneous_app_version=pol.homogeneous_app_version,
            adaptive_replication=pol.adaptive_replication, replication_threshold=pol.replication_threshold,
            cache_size=pol.cache_size, comparator=comparator,
            timeout_counts_as_error=pol.timeout_counts_as_error, purge_grace=pol.purge_grace_seconds,
            size_classes=size_classes)

    def _build_projects(self) -> None:
        vid = itertools.count(1)
        inst_ids = itertools.count(1)
        for p in self.sc.projects:
            versions = []
            for app in p.apps:
                for i, vs in enumerate(app.versions):
                    kinds = frozenset(vs.usage)
                    compat = Compatibility(frozenset(vs.os) if vs.os else None, kinds, vs.min_driver_version)
                    versions.append(AppVersion(next(vid), app.name, i + 1, dict(vs.usage), compat))
            server = ProjectServer(p.name, versions, stream(self.seed, "server", p.name),
                                   self._server_policy(p.jobs.size_classes), instance_ids=inst_ids)
            self.projects[p.name] = SimProject(p, server, versions, stream(self.seed, "jobs", p.name))

    def _build_hosts(self) -> None:
        pop = self.sc.hosts
        prefs_spec = self.sc.client
        classes = reliability_classes(pop.count, pop.reliability.faulty_fraction,
                                      pop.reliability.malicious_fraction, stream(self.seed, "reliability"))
        for i in range(pop.count):
            rng = stream(self.seed, "population", i)
            resources = [ProcessingResource(CPU, pop.cpus, max(1.0, pop.cpu_flops.sample(rng)))]
            eff = {CPU: min(1.0, max(1e-3, pop.efficiency.sample(rng)))}
            driver = 0
            if pop.gpu is not None and rng.random() < pop.gpu.fraction:
                g = pop.gpu
                resources.append(ProcessingResource(g.kind, g.count, max(1.0, g.flops.sample(rng))))
                eff[g.kind] = min(1.0, max(1e-3, g.efficiency.sample(rng)))
                driver = g.driver_version
            mix = pop.reliability
            if classes[i] is Reliability.FAULTY:
                profile = ReliabilityProfile.faulty(mix.faulty_error_prob, mix.faulty_crash_prob)
            elif classes[i] is Reliability.MALICIOUS:
                profile = ReliabilityProfile.malicious(mix.malicious_prob)
            else:
                profile = ReliabilityProfile(Reliability.HONEST, 0.0, mix.honest_crash_prob)
            n_usable = min(pop.cpus, prefs_spec.n_usable_cpus or pop.cpus)
            prefs = ComputingPrefs(n_usable, prefs_spec.throttle_duty_cycle, prefs_spec.buffer_lo_seconds,
                                   prefs_spec.buffer_hi_seconds, prefs_spec.max_ram_fraction)
            host = Host(i + 1, tuple(resources), os_tag=_weighted_choice(rng, pop.os_mix),
                        cpu_vendor_tag=_weighted_choice(rng, pop.vendor_mix), ram_bytes=pop.ram_bytes,
                        free_disk_bytes=pop.free_disk_bytes, driver_version=driver,
                        keyword_prefs=dict(pop.keyword_prefs), reliability=profile, prefs=prefs)
            client = cl.ClientState(host, config=self.client_config, rng=stream(self.seed, "host", i + 1, "backoff"))
            for name, sp in self.projects.items():
                kinds = frozenset(v.primary_kind for v in sp.versions if v.runs_on(host))
                excluded = any(pop.keyword_prefs.get(k) == "no" for k in sp.spec.jobs.keywords)
                client.add_project(cl.ClientProject(name, sp.spec.share, kinds, keyword_excluded=excluded))
            self.hosts.append(SimHost(host, client, stream(self.seed, "host", i + 1, "outcome"),
                                      stream(self.seed, "host", i + 1, "availability"), eff))

    # event plumbing ------------------------------------------------------------

    def push(self, t_ms: int, kind: EventKind, *payload) -> None:
        heapq.heappush(self._heap, (t_ms, next(self._seq), kind, payload))

    def emit(self, event: str, fields: dict) -> None:
        self.trace.emit(self.now_ms, event, fields)

    def emit_records(self, records, **extra) -> None:
        for rec in records:
            self._observe(rec, extra.get("proj"))
            self.emit(rec.event, {**rec.fields, **extra})

    @property
    def now(self) -> float:
        return self.now_ms / MS

    @property
    def draining(self) -> bool:
        return self.now_ms > self.end_ms

    # run -------------------------------------------------------------------------

    def run(self) -> RunResult:
        for name in self.projects:
            self.push(0, EventKind.BATCH_ARRIVAL, name)
        for h in self.hosts:
            self._init_availability(h)
            self.push(0, EventKind.RPC, h, h.poll_token)
        interval = to_ms(self.sc.metrics_interval_seconds)
        self.push(interval, EventKind.METRICS_TICK)
        handlers = {
            EventKind.HOST_ON: self._on_host_on,
            EventKind.HOST_OFF: self._on_host_off,
            EventKind.HOST_DEPARTED: self._on_departed,
            EventKind.JOB_COMPLETE: self._on_complete,
            EventKind.DEADLINE: self._on_deadline,
            EventKind.RPC: self._on_poll,
            EventKind.METRICS_TICK: self._on_metrics,
            EventKind.BATCH_ARRIVAL: self._on_batch,
        }
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            if t > self.stop_ms:
                break
            assert t >= self.now_ms, "event time went backwards"
            self.now_ms = t
            self.events += 1
            handlers[kind](*payload)
        self.now_ms = max(self.now_ms, self.end_ms)
        for h in self.hosts:
            if h.on and not h.departed:
                self._progress(h)
        self._finish_counts()
        metrics = self.collector.finish()
        return RunResult(metrics, self.trace.digest, self.trace.count, self.events, self.trace.lines)

    def _finish_counts(self) -> None:
        created = resolved = 0
        for sp in self.projects.values():
            for job in sp.server.store.jobs.values():
                created += len(job.instances)
                resolved += sum(1 for i in job.instances if i.resolved)
            created += sp.server.store.purged_instances
            resolved += sp.server.store.purged_instances
        self.collector.instances_created = created
        self.collector.instances_resolved = resolved

    # job streams ------------------------------------------------------------------

    def _make_job(self, sp: SimProject, batch: int) -> bool:
        js = sp.spec.jobs
        if js.total_jobs is not None and sp.jobs_created >= js.total_jobs:
            return False
        rng = sp.rng
        size = rng.randrange(js.size_classes) if js.size_classes > 1 else 0
        est = js.est_flop_count.sample(rng) * (size + 1)
        true = est * js.true_flop_ratio.sample(rng)
        p = sp.spec
        app = p.apps[rng.randrange(len(p.apps))].name if len(p.apps) > 1 else p.apps[0].name
        spec = JobSpec(app, est, max(est, true) * 10, p.delay_bound_seconds, min_quorum=p.min_quorum,
                       init_ninstances=p.init_ninstances, max_error_instances=p.max_error_instances,
                       max_success_instances=p.max_success_instances, keywords=frozenset(js.keywords),
                       size_class=size, true_flop_count=true)
        job, records = sp.server.submit(spec, self.now)
        sp.jobs_created += 1
        self.truth[(p.name, job.id)] = JobTruth(p.name, job.id, true, batch, self.now_ms)
        if batch >= 0:
            key = (p.name, batch)
            self.collector.batch_pending[key] = self.collector.batch_pending.get(key, 0) + 1
            self.collector.batch_created.setdefault(key, self.now)
        self.emit_records(records, proj=p.name)
        return True

    def _on_batch(self, name: str) -> None:
        sp = self.projects[name]
        js = sp.spec.jobs
        if self.draining or (js.max_batches is not None and sp.batches >= js.max_batches):
            return
        batch = sp.batches
        sp.batches += 1
        for _ in range(js.batch_size):
            if not self._make_job(sp, batch):
                return
        self.push(self.now_ms + to_ms(js.batch_interval_seconds), EventKind.BATCH_ARRIVAL, name)

    def _top_up(self, sp: SimProject) -> None:
        want = sp.spec.jobs.min_backlog
        if not want or self.draining:
            return
        srv = sp.server
        have = srv.store.unsent_count() + srv.cache.occupied()
        batch = -1  # top-up work is not part of any batch
        while have < want and self._make_job(sp, batch):
            have += 1

    # availability --------------------------------------------------------------------

    def _init_availability(self, h: SimHost) -> None:
        av = self.sc.hosts.availability
        if av.departure_rate > 0:
            t = h.avail_rng.expovariate(av.departure_rate)
            self.push(to_ms(t), EventKind.HOST_DEPARTED, h)
        if av.always_on:
            return
        p_on = av.mean_on_seconds / (av.mean_on_seconds + av.mean_off_seconds)
        h.on = h.avail_rng.random() < p_on
        mean = av.mean_on_seconds if h.on else av.mean_off_seconds
        kind = EventKind.HOST_OFF if h.on else EventKind.HOST_ON
        self.push(to_ms(h.avail_rng.expovariate(1.0 / mean)), kind, h)

    def _on_host_off(self, h: SimHost) -> None:
        if h.departed or not h.on:
            return
        self._progress(h)
        cl.account(h.client, self.now)
        for j in h.client.running():
            j.state = cl.RunState.SUSPENDED
            self._cancel(h, j)
        cl.observe_availability(h.client, 1.0, self.now - h.changed_ms / MS)
        h.on = False
        h.changed_ms = self.now_ms
        self.emit("host_off", {"host": h.host.id})
        mean = self.sc.hosts.availability.mean_off_seconds
        self.push(self.now_ms + to_ms(h.avail_rng.expovariate(1.0 / mean)), EventKind.HOST_ON, h)

    def _on_host_on(self, h: SimHost) -> None:
        if h.departed or h.on:
            return
        cl.observe_availability(h.client, 0.0, self.now - h.changed_ms / MS)
        cl.account(h.client, self.now, active=False)
        h.on = True
        h.changed_ms = self.now_ms
        self.emit("host_on", {"host": h.host.id})
        mean = self.sc.hosts.availability.mean_on_seconds
        self.push(self.now_ms + to_ms(h.avail_rng.expovariate(1.0 / mean)), EventKind.HOST_OFF, h)
        self._client_step(h)

    def _on_departed(self, h: SimHost) -> None:
        if h.departed:
            return
        if h.on:
            self._progress(h)
        for j in h.client.running():
            self._cancel(h, j)
        h.departed = True
        h.on = False
        self.emit("host_departed", {"host": h.host.id, "inflight": len(h.client.queue)})

    # client side ------------------------------------------------------------------------

    def _cancel(self, h: SimHost, j: cl.ClientJob) -> None:
        h.tokens[j.instance_id] = h.tokens.get(j.instance_id, 0) + 1
        h.run_since.pop(j.instance_id, None)

    def _progress(self, h: SimHost) -> None:
        """Bring running jobs' elapsed time, fraction done and checkpoints up to now."""
        duty = h.host.prefs.throttle_duty_cycle
        interval = self.client_config.checkpoint_interval
        cpu_peak = h.host.cpu.peak_flops_per_instance
        for j in h.client.running():
            since_ms, e0 = h.run_since.get(j.instance_id, (self.now_ms, j.elapsed))
            wall = (self.now_ms - since_ms) / MS
            true = h.true_runtime[j.instance_id]
            j.elapsed = min(true, e0 + wall * duty)
            j.fraction_done = max(j.fraction_done, min(1.0, j.elapsed / true))
            done_since_resume = j.elapsed - j.slice_start
            if done_since_resume >= interval:
                cp = j.slice_start + math.floor(done_since_resume / interval) * interval
                if cp > j.checkpoint_elapsed:
                    j.checkpoint_elapsed = cp
                    j.checkpointed = True
            h.run_since[j.instance_id] = (self.now_ms, j.elapsed)
            if wall > 0:
                cost = sum(u * h.host.resource(k).peak_flops_per_instance / cpu_peak for k, u in j.usage.items())
                self.collector.add_compute(j.project, since_ms / MS, wall * duty * cost)

    def _reschedule(self, h: SimHost) -> None:
        res = cl.schedule(h.client, self.now)
        duty = h.host.prefs.throttle_duty_cycle
        for j in res.preempted:
            self._cancel(h, j)
        for j in res.started:
            self._cancel(h, j)
            h.run_since[j.instance_id] = (self.now_ms, j.elapsed)
            left = max(0.0, h.true_runtime[j.instance_id] - j.elapsed) / duty
            self.push(self.now_ms + to_ms(left), EventKind.JOB_COMPLETE, h, j.instance_id,
                      h.tokens[j.instance_id])

    def _on_poll(self, h: SimHost, token: int) -> None:
        if token == h.poll_token:
            self._client_step(h)

    def _client_step(self, h: SimHost) -> None:
        if not h.on or h.departed:
            return
        c = h.client
        self._progress(h)
        self._reschedule(h)
        fetch = None if self.draining else cl.work_fetch(c, self.now)
        reports = cl.report_policy(c, self.now, rpc_pending=fetch is not None)
        by_project = cl.reports_by_project(reports)
        targets = sorted(set(by_project) | ({fetch[0]} if fetch else set()))
        got_work = False
        for name in targets:
            sp = self.projects[name]
            request = fetch[1] if fetch and fetch[0] == name else None
            if request is not None:
                self._top_up(sp)
            done = [(j.instance_id, j.outcome) for j in by_project.get(name, [])]
            reply, records = sp.server.rpc(h.host, request, done, self.now, c.availability)
            self.emit_records(records, proj=name)
            if request is not None:
                cl.on_rpc_result(c, name, bool(reply), self.now)
            for item in reply:
                self._accept(h, name, item)
            got_work = got_work or bool(reply)
        self.emit_records(c.records)
        c.records.clear()
        if got_work:
            self._reschedule(h)
            self.emit_records(c.records)
            c.records.clear()
        h.poll_token += 1
        self.push(self.now_ms + to_ms(self.sc.client.poll_seconds), EventKind.RPC, h, h.poll_token)

    def _accept(self, h: SimHost, project: str, item) -> None:
        truth = self.truth[(project, item.job_id)]
        job = cl.ClientJob(item.instance_id, project, item.version, item.est_flop_count, item.est_flops,
                           item.deadline, item.delay_bound, item.est_wss_bytes, job_id=item.job_id)
        h.client.queue.append(job)
        h.true_runtime[item.instance_id] = truth.true_flop_count / h.speed(item.version)
        h.dispatched_ms[item.instance_id] = self.now_ms
        self.push(to_ms(item.deadline), EventKind.DEADLINE, project, item.instance_id)
        if not truth.dispatched:
            truth.dispatched = True
            self.collector.dispatch_latency.append((self.now_ms - truth.created_ms) / MS)

    def _on_complete(self, h: SimHost, inst_id: int, token: int) -> None:
        if h.departed or not h.on or h.tokens.get(inst_id) != token:
            return
        self._progress(h)
        cl.account(h.client, self.now)  # charge the finishing job before it leaves the queue
        job = next(j for j in h.client.queue if j.instance_id == inst_id)
        true = h.true_runtime[inst_id]
        job.elapsed = true
        truth = self.truth[(job.project, job.job_id)]
        outcome = sample_outcome(h.host.reliability, truth, true, h.rng,
                                 self.sc.hosts.reliability.collusion, self._draw_ids)
        self._cancel(h, job)
        cl.complete(h.client, job, outcome)
        late = self.now > job.deadline
        c = self.collector
        c.completions += 1
        c.late_completions += late
        c.stretch.append((self.now_ms - h.dispatched_ms[inst_id]) / MS / true)
        self.emit("job_complete", {"host": h.host.id, "inst": inst_id, "proj": job.project,
                                   "ok": int(outcome.success), "late": int(late)})
        self._client_step(h)

    # server side ------------------------------------------------------------------------

    def _on_deadline(self, project: str, inst_id: int) -> None:
        records = self.projects[project].server.on_deadline(inst_id, self.now)
        self.emit_records(records, proj=project)

    def _on_metrics(self) -> None:
        for sp in self.projects.values():
            for h in self.hosts:
                if h.departed:
                    sp.server.forget_host(h.host.id)
            self.emit_records(sp.server.store.purge(self.now), proj=sp.spec.name)
        self.push(self.now_ms + to_ms(self.sc.metrics_interval_seconds), EventKind.METRICS_TICK)

    def _observe(self, rec: Record, project: str | None) -> None:
        """Feed server records into the metrics collector."""
        c = self.collector
        ev = rec.event
        f = rec.fields
        if ev == "credit":
            c.claims.setdefault(f["host"], []).append(f["claimed"])
            c.grants.setdefault((project, f["job"]), set()).add(f["granted"])
            c.credit_total[project] = c.credit_total.get(project, 0.0) + f["granted"]
        elif ev in ("job_success", "job_failed"):
            sp = self.projects[project]
            fin = sp.server.finished[f["job"]]
            truth = self.truth[(project, f["job"])]
            if ev == "job_success":
                c.jobs_succeeded += 1
                if fin.canonical_digest != truth.correct_digest:
                    c.wrong_accepted += 1
            else:
                c.jobs_failed += 1
            if f["job"] > c.warmup_jobs and ev == "job_success":
                c.counted_jobs += 1
                c.counted_dispatched += fin.n_dispatched
            key = (project, truth.batch)
            if truth.batch >= 0:
                c.batch_pending[key] -= 1
                if c.batch_pending[key] == 0:
                    c.batch_done[key] = self.now


def run(scenario: Scenario, trace_sink: IO[str] | None = None, keep_trace: bool = False) -> RunResult:
    return Simulation(scenario, trace_sink, keep_trace).run()
