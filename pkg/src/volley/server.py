"""Server-side scheduling: runtime statistics, feeder and job cache, dispatch.

:class:`ProjectServer` ties these together with the lifecycle, validation and
credit modules so a simulator (or a benchmark) can drive a whole project
through RPCs, deadline expiries and daemon passes.
"""

from __future__ import annotations

import bisect
import itertools
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from . import lifecycle as lc
from .client import WorkRequest
from .core import (
    CPU,
    AllocationState,
    AppVersion,
    HrLevel,
    Host,
    JobSpec,
    Record,
    RunningStats,
    hr_class,
    linear_bounded_update,
    peak_flops_of,
)
from .credit import CreditLedger, PfcStats, claimed_credit, granted_credit, pfc
from .validation import (
    BITWISE,
    Comparator,
    ReplicationStats,
    record_validation,
    should_replicate,
)

log = logging.getLogger(__name__)

PROJ_FLOPS_THRESHOLD = 10
DEFAULT_CACHE_SIZE = 1000

SKIP_REASONS = ("no_version", "disk", "deadline", "dup_in_reply", "already_sent", "terminal",
                "hr_violation")


# ---------------------------------------------------------------------------
# runtime estimation


class RuntimeStats:
    """Sample statistics of runtime / est_flop_count per (host, version) and per version."""

    def __init__(self):
        self.by_host_version: dict[tuple[int, int], RunningStats] = {}
        self.by_version: dict[int, RunningStats] = {}

    def host_version(self, host_id: int, version_id: int) -> RunningStats | None:
        return self.by_host_version.get((host_id, version_id))

    def version(self, version_id: int) -> RunningStats | None:
        return self.by_version.get(version_id)


def update_runtime_stats(stats: RuntimeStats, host_id: int, version_id: int,
                         est_flop_count: float, runtime: float) -> RuntimeStats:
    """Add one validated sample; callers only pass successful, validated instances."""
    ratio = runtime / est_flop_count
    stats.by_host_version.setdefault((host_id, version_id), RunningStats()).add(ratio)
    stats.by_version.setdefault(version_id, RunningStats()).add(ratio)
    return stats


def proj_flops(stats: RuntimeStats, host: Host, version: AppVersion,
               threshold: int = PROJ_FLOPS_THRESHOLD) -> float:
    """Projected FLOPS of ``version`` on ``host``.

    Uses the reciprocal mean runtime/FLOP ratio for the pair, else for the
    version, once the sample count exceeds ``threshold``; otherwise peak FLOPS.
    """
    hv = stats.by_host_version.get((host.id, version.id))
    if hv is not None and hv.count > threshold and hv.mean > 0:
        return 1.0 / hv.mean
    v = stats.by_version.get(version.id)
    if v is not None and v.count > threshold and v.mean > 0:
        return 1.0 / v.mean
    return peak_flops_of(version, host)


def est_runtime(spec: JobSpec, stats: RuntimeStats, host: Host, version: AppVersion,
                threshold: int = PROJ_FLOPS_THRESHOLD) -> float:
    return spec.est_flop_count / proj_flops(stats, host, version, threshold)


# ---------------------------------------------------------------------------
# store, cache and feeder


@dataclass
class Slot:
    job_id: int
    instance_id: int
    category: tuple
    taken: bool = False


class JobCache:
    """Fixed-size array of dispatchable instances, refilled by the feeder."""

    def __init__(self, size: int = DEFAULT_CACHE_SIZE):
        self.slots: list[Slot | None] = [None] * size
        self._members: set[int] = set()

    def __len__(self):
        return len(self.slots)

    def occupied(self) -> int:
        return len(self._members)

    def contains(self, instance_id: int) -> bool:
        return instance_id in self._members

    def put(self, idx: int, slot: Slot) -> None:
        assert self.slots[idx] is None
        self.slots[idx] = slot
        self._members.add(slot.instance_id)

    def vacate(self, idx: int) -> None:
        slot = self.slots[idx]
        if slot is not None:
            self._members.discard(slot.instance_id)
            self.slots[idx] = None

    def category_counts(self) -> dict[tuple, int]:
        out: dict[tuple, int] = {}
        for s in self.slots:
            if s is not None:
                out[s.category] = out.get(s.category, 0) + 1
        return out


class JobStore:
    """In-memory stand-in for the project database.

    Wraps the lifecycle FSM so every newly created unsent instance lands in the
    feeder's per-category backlog.
    """

    def __init__(self, config: lc.LifecycleConfig | None = None, adaptive: bool = False,
                 instance_ids: Iterator[int] | None = None):
        self.config = config or lc.LifecycleConfig()
        self.adaptive = adaptive
        self.jobs: dict[int, lc.Job] = {}
        self.job_of: dict[int, int] = {}
        self.instances: dict[int, lc.JobInstance] = {}
        self._unsent: dict[tuple, deque[int]] = {}
        self._rr = 0
        self._job_ids = itertools.count(1)
        # a shared counter keeps instance ids unique across several projects
        self._inst_ids = instance_ids if instance_ids is not None else itertools.count(1)
        self.flagged: dict[int, None] = {}
        self.skipped_at: dict[int, float] = {}
        self.purged = 0
        self.purged_instances = 0

    @staticmethod
    def category(job: lc.Job) -> tuple:
        return (job.hr_class_lock or "", job.app_version_lock or 0, job.spec.size_class)

    def _index(self, job: lc.Job) -> None:
        for inst in job.instances:
            if inst.id not in self.instances:
                self.instances[inst.id] = inst
                self.job_of[inst.id] = job.id
                if inst.state is lc.InstanceState.UNSENT:
                    self._unsent.setdefault(self.category(job), deque()).append(inst.id)

    def create_job(self, spec: JobSpec, now: float = 0.0) -> tuple[lc.Job, list[Record]]:
        job = lc.create_job(spec, next(self._job_ids), now, self._inst_ids.__next__,
                            defer_replication=self.adaptive and spec.min_quorum > 1)
        self.jobs[job.id] = job
        self._index(job)
        return job, [Record("job_created", {"job": job.id, "app": spec.app_id,
                                            "n": len(job.instances)})]

    def job_for(self, instance_id: int) -> lc.Job:
        return self.jobs[self.job_of[instance_id]]

    def unsent_count(self) -> int:
        """Backlog entries not yet pulled into a cache (may include stale ids)."""
        return sum(len(q) for q in self._unsent.values())

    def report(self, instance_id: int, outcome: lc.Outcome, now: float) -> list[Record]:
        if instance_id not in self.instances:
            return [Record("error", {"what": "unknown_instance", "inst": instance_id})]
        job = self.job_for(instance_id)
        effects = lc.on_report(job, self.instances[instance_id], outcome, now, self.config.comparator)
        if job.needs_transition:
            self.flagged[job.id] = None
        return effects

    def deadline(self, instance_id: int, now: float) -> list[Record]:
        inst = self.instances.get(instance_id)
        if inst is None:
            return []
        job = self.job_for(instance_id)
        effects = lc.on_deadline(job, inst, now)
        if job.needs_transition:
            self.flagged[job.id] = None
        return effects

    def transition(self, job: lc.Job, now: float) -> list[Record]:
        effects = lc.transition(job, self.config.comparator, now, self.config)
        self._index(job)
        return effects

    def run_transitioner(self, now: float) -> list[tuple[lc.Job, list[Record]]]:
        """Process every flagged job once; returns per-job effects."""
        out = []
        while self.flagged:
            job_id = next(iter(self.flagged))
            del self.flagged[job_id]
            job = self.jobs.get(job_id)
            if job is not None and job.needs_transition:
                out.append((job, self.transition(job, now)))
        return out

    def sent_to_host(self, job: lc.Job, host_id: int) -> bool:
        return any(i.host_id == host_id for i in job.instances)

    def next_unsent(self) -> int | None:
        """Round-robin across categories so every backlog category reaches the cache."""
        cats = list(self._unsent)
        for k in range(len(cats)):
            cat = cats[(self._rr + k) % len(cats)]
            q = self._unsent[cat]
            while q:
                iid = q.popleft()
                if self.instances[iid].state is lc.InstanceState.UNSENT:
                    self._rr = (self._rr + k + 1) % len(cats)
                    return iid
            del self._unsent[cat]
            return self.next_unsent()
        return None

    def requeue(self, instance_id: int) -> None:
        job = self.job_for(instance_id)
        self._unsent.setdefault(self.category(job), deque()).appendleft(instance_id)

    def purge(self, now: float, grace: float | None = None) -> list[Record]:
        grace = self.config.purge_grace if grace is None else grace
        out = []
        for job_id in [j for j, job in self.jobs.items() if lc.purge_eligible(job, grace, now)]:
            job = self.jobs.pop(job_id)
            for inst in job.instances:
                self.instances.pop(inst.id, None)
                self.job_of.pop(inst.id, None)
            self.skipped_at.pop(job_id, None)
            self.purged += 1
            self.purged_instances += len(job.instances)
            out.append(Record("job_purged", {"job": job_id}))
        return out


def feeder_fill(cache: JobCache, store: JobStore) -> JobCache:
    """Fill vacant slots with unsent instances, rotating over job categories."""
    for idx, slot in enumerate(cache.slots):
        if slot is not None:
            continue
        while True:
            iid = store.next_unsent()
            if iid is None:
                return cache
            if not cache.contains(iid):
                break
        job = store.job_for(iid)
        cache.put(idx, Slot(job.id, iid, store.category(job)))
    return cache


# ---------------------------------------------------------------------------
# dispatch


@dataclass(frozen=True)
class ScoreWeights:
    keyword: float = 1.0
    allocation: float = 1.0
    skipped: float = 0.25
    locality: float = 2.0
    size: float = 0.5


@dataclass
class ServerPolicy:
    score_weights: ScoreWeights = ScoreWeights()
    hr_level: HrLevel = HrLevel.NONE
    homogeneous_app_version: bool = False
    adaptive_replication: bool = False
    replication_threshold: int = 10
    proj_flops_threshold: int = PROJ_FLOPS_THRESHOLD
    cache_size: int = DEFAULT_CACHE_SIZE
    comparator: Comparator = BITWISE
    timeout_counts_as_error: bool = False
    purge_grace: float = lc.DEFAULT_PURGE_GRACE
    skip_memory: float = 86400.0  # how long a skip keeps earning the score bonus
    size_classes: int = 1
    quantile_refresh: float = 86400.0


@dataclass
class ReplyItem:
    job_id: int
    instance_id: int
    version: AppVersion
    est_flops: float
    est_runtime: float  # raw seconds
    est_scaled_runtime: float
    est_flop_count: float
    est_wss_bytes: float
    delay_bound: float
    deadline: float
    score: float


@dataclass
class DispatchContext:
    host: Host
    request: WorkRequest
    availability: Mapping[str, float] = field(default_factory=dict)
    remaining_disk: float | None = None
    reply: list[ReplyItem] = field(default_factory=list)
    records: list[Record] = field(default_factory=list)

    def __post_init__(self):
        if self.remaining_disk is None:
            self.remaining_disk = self.host.free_disk_bytes

    def scale(self, version: AppVersion) -> float:
        """Availability times throttle duty for the resource the version runs on."""
        a = self.availability.get(version.primary_kind, 1.0)
        return max(a, 1e-6) * self.host.prefs.throttle_duty_cycle


class Allocations:
    """Linear-bounded balances of job submitters within one project."""

    def __init__(self, shares: Mapping[str, float] | None = None, cap: float = 86400.0):
        shares = dict(shares or {"default": 1.0})
        total = sum(shares.values())
        self.states = {k: AllocationState(0.0, v / total, cap) for k, v in shares.items()}
        self._last = 0.0
        self._used = 0.0

    def normalized(self, submitter: str) -> float:
        s = self.states.get(submitter)
        return 0.0 if s is None else s.balance / s.cap

    def advance(self, now: float) -> None:
        """Grow every balance at the project's observed compute throughput."""
        elapsed = now - self._last
        if elapsed <= 0:
            return
        base = self._used / now if now > 0 else 0.0
        self.states = {k: linear_bounded_update(s, elapsed, base, 0.0) for k, s in self.states.items()}
        self._last = now

    def charge(self, submitter: str, seconds: float) -> None:
        self._used += seconds
        s = self.states.get(submitter)
        if s is not None:
            self.states[submitter] = linear_bounded_update(s, 0.0, 0.0, seconds)


def score(job: lc.Job, host: Host, version: AppVersion, ctx: DispatchContext, *,
          weights: ScoreWeights = ScoreWeights(), allocation: float = 0.0,
          skipped: bool = False, host_size_class: int | None = None) -> float | None:
    """Weighted value of sending ``job`` to ``host``; ``None`` if a "no" keyword excludes it."""
    spec = job.spec
    prefs = host.keyword_prefs
    yes = 0
    for kw in spec.keywords:
        pref = prefs.get(kw)
        if pref == "no":
            return None
        if pref == "yes":
            yes += 1
    s = weights.keyword * yes + weights.allocation * allocation
    if skipped:
        s += weights.skipped
    if spec.input_files and spec.input_files <= host.sticky_files:
        s += weights.locality
    if host_size_class is not None and spec.size_class == host_size_class:
        s += weights.size
    return s


def _valid_request(ctx: DispatchContext) -> str | None:
    for kind, rr in ctx.request.resources.items():
        if kind != CPU and ctx.host.resource(kind) is None:
            return f"request for {kind} which the host lacks"
        if rr.req_runtime < 0 or rr.req_idle < 0 or rr.queue_dur < 0:
            return f"negative request field for {kind}"
    return None


def handle_request(
    ctx: DispatchContext,
    cache: JobCache,
    store: JobStore,
    stats: RuntimeStats,
    versions_by_app: Mapping[str, Sequence[AppVersion]],
    rng,
    now: float,
    policy: ServerPolicy | None = None,
    allocations: Allocations | None = None,
    size_boundaries: Sequence[float] | None = None,
    replication: ReplicationStats | None = None,
) -> list[ReplyItem]:
    """Choose jobs for one work request.

    GPUs are handled before the CPU. For each resource the cache is scanned
    from a random offset to build scored candidates, which then pass the fast
    check (disk, deadline, duplicate in reply) and slow check (already sent to
    this host, job terminal, homogeneous-redundancy lock) before acceptance.
    """
    policy = policy or ServerPolicy()
    weights = policy.score_weights
    host = ctx.host
    problem = _valid_request(ctx)
    if problem:
        ctx.records.append(Record("error", {"host": host.id, "what": problem}))
        return ctx.reply

    host_class = hr_class(host, policy.hr_level) if policy.hr_level is not HrLevel.NONE else None
    in_reply = {item.job_id for item in ctx.reply}
    kinds = sorted(ctx.request.resources, key=lambda k: (k == CPU, k))
    n = len(cache.slots)

    for kind in kinds:
        rr = ctx.request.resources[kind]
        if rr.req_runtime <= 0 and rr.req_idle <= 0:
            continue
        # admissible versions per app for this host and resource, fastest first
        admissible: dict[str, list[tuple[float, AppVersion]]] = {}
        for app, vs in versions_by_app.items():
            ok = [(proj_flops(stats, host, v, policy.proj_flops_threshold), v)
                  for v in vs if v.primary_kind == kind and v.runs_on(host)]
            ok.sort(key=lambda t: (-t[0], -t[1].version_number, t[1].id))
            admissible[app] = ok
        size_class = None
        if size_boundaries:
            best = max((pf for ok in admissible.values() for pf, _ in ok), default=None)
            if best is not None:
                size_class = bisect.bisect_right(size_boundaries, best)

        candidates = []
        start = rng.randrange(n) if n else 0
        for off in range(n):
            idx = (start + off) % n
            slot = cache.slots[idx]
            if slot is None or slot.taken:
                continue
            job = store.jobs.get(slot.job_id)
            if job is None:
                continue
            chosen = None
            for pf, v in admissible.get(job.spec.app_id, ()):
                if job.app_version_lock is not None and v.id != job.app_version_lock:
                    continue
                chosen = (pf, v)
                break
            if chosen is None:
                continue
            if host_class is not None and job.hr_class_lock not in (None, host_class):
                continue
            skipped = now - store.skipped_at.get(job.id, -1e300) <= policy.skip_memory
            sc = score(job, host, chosen[1], ctx, weights=weights,
                       allocation=allocations.normalized(job.spec.submitter_id) if allocations else 0.0,
                       skipped=skipped, host_size_class=size_class)
            if sc is None:
                continue
            candidates.append((-sc, off, idx, chosen[0], chosen[1]))
        candidates.sort(key=lambda c: (c[0], c[1]))

        for neg_score, _, idx, pf, version in candidates:
            slot = cache.slots[idx]
            if slot is None or slot.taken:
                continue
            job = store.jobs[slot.job_id]
            spec = job.spec
            raw = spec.est_flop_count / pf
            scaled = raw / ctx.scale(version)
            usage = version.usage(kind)

            reason = None
            if spec.disk_bound_bytes > ctx.remaining_disk:
                reason = "disk"
            elif rr.queue_dur + scaled > spec.delay_bound_seconds:
                reason = "deadline"
            elif job.id in in_reply:
                reason = "dup_in_reply"
            if reason is None:
                slot.taken = True
                inst = store.instances.get(slot.instance_id)
                if store.sent_to_host(job, host.id):
                    reason = "already_sent"
                elif job.terminal or inst is None or inst.state is not lc.InstanceState.UNSENT:
                    reason = "terminal"
                elif host_class is not None and job.hr_class_lock not in (None, host_class):
                    reason = "hr_violation"
                elif job.app_version_lock is not None and job.app_version_lock != version.id:
                    reason = "hr_violation"
                if reason == "terminal":
                    cache.vacate(idx)
                elif reason is not None:
                    slot.taken = False
            if reason is not None:
                store.skipped_at[job.id] = now
                ctx.records.append(Record("skip", {"job": job.id, "host": host.id, "reason": reason}))
                continue

            cache.vacate(idx)
            effects = lc.dispatch(job, inst, host.id, version.id, now, hr_class=host_class,
                                  lock_version=policy.homogeneous_app_version)
            effects[0].fields["score"] = -neg_score
            ctx.records.extend(effects)
            if not job.replication_decided:
                rep = should_replicate(replication or ReplicationStats(), host.id, version.id, rng,
                                       policy.replication_threshold)
                lc.decide_replication(job, rep)
                if not rep:
                    ctx.records.append(Record("replication_skipped", {"job": job.id, "host": host.id}))
                store.flagged[job.id] = None
            in_reply.add(job.id)
            if allocations is not None:
                allocations.charge(spec.submitter_id, scaled * usage)
            ctx.reply.append(ReplyItem(job.id, inst.id, version, pf, raw, scaled, spec.est_flop_count,
                                       spec.est_wss_bytes, spec.delay_bound_seconds, inst.deadline,
                                       -neg_score))
            ctx.remaining_disk -= spec.disk_bound_bytes
            rr.queue_dur += scaled
            rr.req_runtime -= scaled * usage
            rr.req_idle -= usage
            if rr.req_runtime <= 0 and rr.req_idle <= 0:
                break
    return ctx.reply


# ---------------------------------------------------------------------------
# project server


@dataclass
class Assimilated:
    """Outcome of a finished job, kept for metrics."""

    job_id: int
    success: bool
    canonical_digest: tuple
    granted: float
    created_at: float
    finished_at: float
    n_instances: int
    n_dispatched: int


class ProjectServer:
    """One project's server: store, feeder/cache, daemons and scheduler."""

    def __init__(self, name: str, versions: Iterable[AppVersion], rng, policy: ServerPolicy | None = None,
                 submitter_shares: Mapping[str, float] | None = None,
                 instance_ids: Iterator[int] | None = None):
        self.name = name
        self.policy = policy or ServerPolicy()
        self.rng = rng
        self.versions = {v.id: v for v in versions}
        self.versions_by_app: dict[str, list[AppVersion]] = {}
        for v in self.versions.values():
            self.versions_by_app.setdefault(v.app_id, []).append(v)
        cfg = lc.LifecycleConfig(self.policy.comparator, self.policy.timeout_counts_as_error,
                                 self.policy.purge_grace)
        self.store = JobStore(cfg, adaptive=self.policy.adaptive_replication, instance_ids=instance_ids)
        self.cache = JobCache(self.policy.cache_size)
        self.runtime_stats = RuntimeStats()
        self.pfc_stats = PfcStats()
        self.replication = ReplicationStats()
        self.allocations = Allocations(submitter_shares)
        self.credit = CreditLedger()
        self.granted: dict[int, float] = {}
        self.hosts: dict[int, Host] = {}
        self.host_speed: dict[int, float] = {}
        self.size_boundaries: list[float] = []
        self._quantiles_at = -1e300
        self.finished: dict[int, Assimilated] = {}
        self.resources = sorted({v.primary_kind for v in self.versions.values()})

    # job submission -------------------------------------------------------

    def submit(self, spec: JobSpec, now: float) -> tuple[lc.Job, list[Record]]:
        return self.store.create_job(spec, now)

    # daemons ----------------------------------------------------------------

    def run_daemons(self, now: float) -> list[Record]:
        """Transitioner, then validator/assimilator bookkeeping for finished jobs."""
        records: list[Record] = []
        for job, effects in self.store.run_transitioner(now):
            records.extend(effects)
            if job.terminal and any(e.event in ("job_success", "job_failed") for e in effects):
                records.extend(self._assimilate(job, now))
        return records

    def _replicated(self, job: lc.Job) -> bool:
        return job.quorum >= 2

    def _validated_sample(self, job: lc.Job, inst: lc.JobInstance, now: float) -> None:
        version = self.versions[inst.app_version_id]
        if self._replicated(job):
            record_validation(self.replication, inst.host_id, version.id, bool(inst.validity))
        if not inst.validity:
            return
        host = self.hosts.get(inst.host_id)
        if inst.reported_runtime > 0:
            update_runtime_stats(self.runtime_stats, inst.host_id, version.id,
                                 job.spec.est_flop_count, inst.reported_runtime)
        if host is not None:
            p = pfc(inst.reported_runtime, version, host)
            if not p.anomalous:
                self.pfc_stats.update(inst.host_id, version, p.flops, job.spec.est_flop_count)

    def _assimilate(self, job: lc.Job, now: float) -> list[Record]:
        records = []
        granted = 0.0
        digest: tuple = ()
        if job.state is lc.JobState.SUCCESS:
            digest = job.canonical.output_digest
            valid = [i for i in job.instances if i.state is lc.InstanceState.SUCCESS and i.validity]
            claims = []
            for inst in valid:
                host = self.hosts.get(inst.host_id)
                version = self.versions[inst.app_version_id]
                p = pfc(inst.reported_runtime, version, host) if host else None
                if p is None or p.anomalous:
                    continue
                c = claimed_credit(p.flops, inst.host_id, version, self.pfc_stats)
                claims.append((inst, c))
            granted = granted_credit([c for _, c in claims]) if claims else 0.0
            self.granted[job.id] = granted
            for inst, c in claims:
                records.append(Record("credit", {"job": job.id, "inst": inst.id, "host": inst.host_id,
                                                 "claimed": c, "granted": granted}))
                self.credit.grant(f"host:{inst.host_id}", granted, now)
                self.credit.grant(f"project:{self.name}", granted, now)
            records.append(Record("credit_granted", {"job": job.id, "amount": granted}))
            for inst in job.instances:
                if inst.state is lc.InstanceState.SUCCESS:
                    self._validated_sample(job, inst, now)
        self.finished[job.id] = (Assimilated(job.id, job.state is lc.JobState.SUCCESS, digest, granted,
                                         job.created_at, now, len(job.instances),
                                         sum(1 for i in job.instances if i.host_id is not None)))
        return records

    def _late_validation(self, inst_id: int, now: float) -> list[Record]:
        job = self.store.job_for(inst_id)
        inst = self.store.instances[inst_id]
        self._validated_sample(job, inst, now)
        if not inst.validity:
            return []
        amount = self.granted.get(job.id, 0.0)
        self.credit.grant(f"host:{inst.host_id}", amount, now)
        self.credit.grant(f"project:{self.name}", amount, now)
        return [Record("credit", {"job": job.id, "inst": inst.id, "host": inst.host_id,
                                  "claimed": amount, "granted": amount})]

    # events -------------------------------------------------------------------

    def on_deadline(self, instance_id: int, now: float) -> list[Record]:
        records = self.store.deadline(instance_id, now)
        return records + self.run_daemons(now)

    def _refresh_quantiles(self, now: float) -> None:
        if self.policy.size_classes <= 1 or now - self._quantiles_at < self.policy.quantile_refresh:
            return
        self._quantiles_at = now
        speeds = sorted(self.host_speed.values())
        k = self.policy.size_classes
        if len(speeds) < k:
            self.size_boundaries = []
            return
        self.size_boundaries = [speeds[(len(speeds) * q) // k] for q in range(1, k)]

    def forget_host(self, host_id: int) -> None:
        self.host_speed.pop(host_id, None)

    def rpc(self, host: Host, request: WorkRequest | None, reports: Sequence[tuple[int, lc.Outcome]],
            now: float, availability: Mapping[str, float] | None = None) -> tuple[list[ReplyItem], list[Record]]:
        """Handle one scheduler RPC: reports first, then a work request."""
        self.hosts[host.id] = host
        records: list[Record] = []
        for inst_id, outcome in reports:
            effects = self.store.report(inst_id, outcome, now)
            records.extend(effects)
            if any(e.event == "instance_validated" for e in effects):
                records.extend(self._late_validation(inst_id, now))
        records.extend(self.run_daemons(now))
        reply: list[ReplyItem] = []
        if request is not None and request.wants_work():
            cpu_versions = [v for v in self.versions.values() if v.is_cpu_only and v.runs_on(host)]
            if cpu_versions:
                self.host_speed[host.id] = max(proj_flops(self.runtime_stats, host, v) for v in cpu_versions)
            self._refresh_quantiles(now)
            self.allocations.advance(now)
            feeder_fill(self.cache, self.store)
            ctx = DispatchContext(host, request, availability or {})
            reply = handle_request(ctx, self.cache, self.store, self.runtime_stats, self.versions_by_app,
                                   self.rng, now, self.policy, self.allocations, self.size_boundaries,
                                   self.replication)
            records.extend(ctx.records)
            # adaptive replication decisions may have flagged jobs for more instances
            records.extend(self.run_daemons(now))
        return reply, records
