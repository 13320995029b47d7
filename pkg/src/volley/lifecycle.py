"""Server-side job state machine: instances, deadlines, quorum and termination.

All replacement instances are created by :func:`transition`; report and
deadline handlers only record what happened and flag the job, mirroring the
flag-and-sweep handoff between the scheduler, validator and transitioner.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .core import JobSpec, Record
from .validation import BITWISE, Comparator, equivalent, majority_group

DEFAULT_PURGE_GRACE = 3 * 86400.0
_DEADLINE_SLACK = 1e-6


class InstanceState(enum.Enum):
    UNSENT = "unsent"
    IN_PROGRESS = "in_progress"
    SUCCESS = "success_reported"
    ERROR = "error_reported"
    TIMED_OUT = "timed_out"
    CANCELLED = "cancelled"


RESOLVED = frozenset(
    {InstanceState.SUCCESS, InstanceState.ERROR, InstanceState.TIMED_OUT, InstanceState.CANCELLED}
)


class JobState(enum.Enum):
    ACTIVE = "active"
    SUCCESS = "success"
    FAILED = "failed"


@dataclass
class JobInstance:
    id: int
    job_id: int
    created_at: float = 0.0
    host_id: int | None = None
    app_version_id: int | None = None
    dispatched_at: float | None = None
    deadline: float | None = None
    state: InstanceState = InstanceState.UNSENT
    reported_runtime: float = 0.0
    output_digest: tuple = ()
    validity: bool | None = None  # None until compared against the canonical result
    late: bool = False  # reported after its deadline passed

    @property
    def resolved(self) -> bool:
        return self.state in RESOLVED


@dataclass(frozen=True)
class Outcome:
    success: bool
    digest: tuple = ()
    runtime: float = 0.0

    @classmethod
    def ok(cls, digest: Sequence[float], runtime: float) -> "Outcome":
        return cls(True, tuple(digest), runtime)

    @classmethod
    def error(cls, runtime: float = 0.0) -> "Outcome":
        return cls(False, (), runtime)


@dataclass
class LifecycleConfig:
    comparator: Comparator = BITWISE
    timeout_counts_as_error: bool = False
    purge_grace: float = DEFAULT_PURGE_GRACE


_DEFAULT_CONFIG = LifecycleConfig()


@dataclass
class Job:
    id: int
    spec: JobSpec
    created_at: float = 0.0
    instances: list[JobInstance] = field(default_factory=list)
    state: JobState = JobState.ACTIVE
    canonical_id: int | None = None
    fail_reason: str | None = None
    terminal_time: float | None = None
    hr_class_lock: str | None = None
    app_version_lock: int | None = None
    needs_transition: bool = False
    # effective replication parameters; adaptive replication may lower the quorum
    quorum: int = 1
    target_nresults: int = 1
    replication_decided: bool = True
    _new_id: Callable[[], int] = field(default=None, repr=False)
    _checked_successes: int = field(default=0, repr=False)

    @property
    def terminal(self) -> bool:
        return self.state is not JobState.ACTIVE

    def instance(self, instance_id: int) -> JobInstance:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise KeyError(instance_id)

    def count(self, *states: InstanceState) -> int:
        return sum(1 for i in self.instances if i.state in states)

    @property
    def canonical(self) -> JobInstance | None:
        return None if self.canonical_id is None else self.instance(self.canonical_id)

    def _spawn(self, now: float) -> JobInstance:
        inst = JobInstance(self._new_id(), self.id, created_at=now)
        self.instances.append(inst)
        return inst


def create_job(
    spec: JobSpec,
    job_id: int,
    now: float = 0.0,
    id_source: Callable[[], int] | None = None,
    defer_replication: bool = False,
) -> Job:
    """Create a job and its initial unsent instances.

    With ``defer_replication`` a single instance is created and the decision to
    replicate is taken at first dispatch (see :func:`decide_replication`).
    """
    spec.validate()
    if id_source is None:
        id_source = itertools.count(1).__next__
    job = Job(job_id, spec, created_at=now, quorum=spec.min_quorum, _new_id=id_source)
    if defer_replication:
        job.target_nresults = 1
        job.replication_decided = False
    else:
        job.target_nresults = spec.init_ninstances
    for _ in range(job.target_nresults):
        job._spawn(now)
    return job


def decide_replication(job: Job, replicate: bool) -> None:
    """Settle a deferred replication decision; call :func:`transition` afterwards."""
    if job.replication_decided:
        return
    job.replication_decided = True
    if replicate:
        job.target_nresults = max(job.target_nresults, job.spec.init_ninstances)
    else:
        job.quorum = 1
    job.needs_transition = True


def dispatch(
    job: Job,
    inst: JobInstance,
    host_id: int,
    version_id: int,
    now: float,
    hr_class: str | None = None,
    lock_version: bool = False,
) -> list[Record]:
    if job.terminal or inst.state is not InstanceState.UNSENT:
        raise ValueError(f"instance {inst.id} of job {job.id} is not dispatchable")
    inst.state = InstanceState.IN_PROGRESS
    inst.host_id = host_id
    inst.app_version_id = version_id
    inst.dispatched_at = now
    inst.deadline = now + job.spec.delay_bound_seconds
    if hr_class is not None and job.hr_class_lock is None:
        job.hr_class_lock = hr_class
    if lock_version and job.app_version_lock is None:
        job.app_version_lock = version_id
    return [Record("instance_dispatched", {"job": job.id, "inst": inst.id, "host": host_id,
                                            "version": version_id})]


def on_deadline(job: Job, inst: JobInstance, now: float) -> list[Record]:
    """Mark an unreported instance as lost.

    On a terminal job the instance is still resolved as timed out, but the job
    is not flagged, so no replacement is ever created.
    """
    if inst.state is not InstanceState.IN_PROGRESS or inst.deadline is None:
        return []
    if now + _DEADLINE_SLACK < inst.deadline:
        return []
    inst.state = InstanceState.TIMED_OUT
    if not job.terminal:
        job.needs_transition = True
    return [Record("instance_timeout", {"job": job.id, "inst": inst.id, "host": inst.host_id})]


def on_report(
    job: Job,
    inst: JobInstance,
    outcome: Outcome,
    now: float,
    comparator: Comparator = BITWISE,
) -> list[Record]:
    if inst.state not in (InstanceState.IN_PROGRESS, InstanceState.TIMED_OUT):
        return []
    inst.late = inst.state is InstanceState.TIMED_OUT
    inst.reported_runtime = outcome.runtime
    rec = {"job": job.id, "inst": inst.id, "host": inst.host_id,
           "ok": int(outcome.success), "late": int(inst.late)}
    effects = [Record("instance_reported", rec)]
    if not outcome.success:
        inst.state = InstanceState.ERROR
        if not job.terminal:
            job.needs_transition = True
        return effects
    inst.state = InstanceState.SUCCESS
    inst.output_digest = outcome.digest
    if job.state is JobState.SUCCESS:
        inst.validity = equivalent(inst.output_digest, job.canonical.output_digest, comparator)
        effects.append(Record("instance_validated", {"job": job.id, "inst": inst.id,
                                                      "valid": int(inst.validity)}))
    elif job.state is JobState.ACTIVE:
        job.needs_transition = True
    return effects


def _finish(job: Job, state: JobState, now: float) -> None:
    job.state = state
    job.terminal_time = now
    for inst in job.instances:
        if inst.state is InstanceState.UNSENT:
            inst.state = InstanceState.CANCELLED


def transition(job: Job, comparator: Comparator = BITWISE, now: float = 0.0,
               config: LifecycleConfig | None = None) -> list[Record]:
    """Advance a flagged job: validate, terminate, or top up live instances."""
    config = config or _DEFAULT_CONFIG
    job.needs_transition = False
    if job.terminal:
        return []
    effects: list[Record] = []
    successes = []
    n_error = n_live = 0
    timeouts_fail = config.timeout_counts_as_error
    for inst in job.instances:
        st = inst.state
        if st is InstanceState.SUCCESS:
            successes.append(inst)
        elif st is InstanceState.UNSENT or st is InstanceState.IN_PROGRESS:
            n_live += 1
        elif st is InstanceState.ERROR or (timeouts_fail and st is InstanceState.TIMED_OUT):
            n_error += 1
    n_success = len(successes)

    if n_success >= job.quorum and n_success != job._checked_successes:
        job._checked_successes = n_success
        group = majority_group(successes, comparator)
        if group is not None:
            cid = group[0]
            members = set(group)
            for s in successes:
                s.validity = s.id in members
            job.canonical_id = cid
            _finish(job, JobState.SUCCESS, now)
            effects.append(Record("quorum_reached", {"job": job.id, "canonical": cid,
                                                     "agree": len(group), "n": n_success}))
            effects.append(Record("job_success", {"job": job.id, "canonical": cid}))
            return effects
        job.target_nresults = max(job.target_nresults, n_success + 1)
        effects.append(Record("quorum_failed", {"job": job.id, "n": n_success}))

    reason = None
    if n_success > job.spec.max_success_instances:
        reason = "nondeterministic"
    elif n_error > job.spec.max_error_instances:
        reason = "too_many_errors"
    if reason is not None:
        job.fail_reason = reason
        _finish(job, JobState.FAILED, now)
        effects.append(Record("job_failed", {"job": job.id, "reason": reason}))
        return effects

    for _ in range(job.target_nresults - n_live - n_success):
        inst = job._spawn(now)
        effects.append(Record("instance_created", {"job": job.id, "inst": inst.id}))
    return effects


def purge_eligible(job: Job, grace: float = DEFAULT_PURGE_GRACE, now: float = 0.0) -> bool:
    if not job.terminal or job.terminal_time is None:
        return False
    if not all(i.resolved for i in job.instances):
        return False
    return now >= job.terminal_time + grace
