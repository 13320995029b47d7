"""Independent brute-force oracles shared by unit and acceptance tests."""

from __future__ import annotations

import itertools
from fractions import Fraction

from volley.core import JobSpec
from volley.lifecycle import (
    InstanceState,
    Outcome,
    create_job,
    dispatch,
    on_deadline,
    on_report,
    transition,
)

MATCH, MISMATCH, ERROR, TIMEOUT = "M", "X", "E", "T"
OUTCOMES = (MATCH, MISMATCH, ERROR, TIMEOUT)

CORRECT = (42.0,)


def fsm_spec(min_quorum=2, init=2, max_error=3, max_success=6):
    return JobSpec("app", 1e12, 1e13, 1000.0, min_quorum=min_quorum, init_ninstances=init,
                   max_error_instances=max_error, max_success_instances=max_success)


_wrong = itertools.count(1)


class _Run:
    """Mutable driver state: the job plus bookkeeping for one outcome sequence."""

    __slots__ = ("job", "now", "terminal_at_count", "stalled")

    def __init__(self, job):
        self.job = job
        self.now = 0.0
        self.terminal_at_count = None
        self.stalled = False

    def clone(self):
        other = _Run.__new__(_Run)
        job = object.__new__(type(self.job))
        job.__dict__.update(self.job.__dict__)
        insts = []
        for inst in self.job.instances:
            c = object.__new__(type(inst))
            c.__dict__.update(inst.__dict__)
            insts.append(c)
        job.instances = insts
        other.job = job
        other.now = self.now
        other.terminal_at_count = self.terminal_at_count
        other.stalled = self.stalled
        return other


def _step(run, outcome):
    """Dispatch everything unsent, then resolve the oldest in-flight instance.

    Returns False when nothing more can happen (terminal with no instance left
    to report, or an active job with nothing in flight).
    """
    job = run.job
    run.now += 1.0
    if not job.terminal:
        for inst in job.instances:
            if inst.state is InstanceState.UNSENT:
                dispatch(job, inst, host_id=inst.id, version_id=1, now=run.now)
    live = None
    for inst in job.instances:
        if inst.state is InstanceState.IN_PROGRESS:
            live = inst
            break
    if job.terminal:
        if run.terminal_at_count is None:
            run.terminal_at_count = len(job.instances)
        if live is None:
            return False
    elif live is None:
        run.stalled = True
        return False
    if outcome == TIMEOUT:
        on_deadline(job, live, live.deadline)
    elif outcome == ERROR:
        on_report(job, live, Outcome.error(1.0), run.now)
    elif outcome == MATCH:
        on_report(job, live, Outcome.ok(CORRECT, 1.0), run.now)
    else:
        on_report(job, live, Outcome.ok((-float(next(_wrong)),), 1.0), run.now)
    if job.needs_transition:
        transition(job, now=run.now)
    if job.terminal and run.terminal_at_count is None:
        run.terminal_at_count = len(job.instances)
    return True


def _finish(run, spec, max_steps):
    """Resolve remaining instances correctly until the job terminates."""
    job = run.job
    steps = 0
    while not job.terminal and not run.stalled and steps < max_steps:
        _step(run, MATCH)
        steps += 1
    timeouts = job.count(InstanceState.TIMED_OUT)
    return {
        "job": job,
        "terminal": job.terminal,
        "stalled": run.stalled,
        "created_after_terminal": (len(job.instances) - run.terminal_at_count) if job.terminal else 0,
        "n_instances": len(job.instances),
        "bound": spec.init_ninstances + spec.max_error_instances + spec.max_success_instances + timeouts,
    }


def drive_sequence(seq, spec=None, max_steps=200):
    """Replay a per-instance outcome sequence through the job FSM.

    All unsent instances are dispatched eagerly; each step resolves the oldest
    in-flight instance with the next outcome. Outcomes arriving after the job
    terminated are applied to still-running instances as late reports. When
    the sequence runs out, remaining instances resolve correctly until the
    job terminates.
    """
    spec = spec or fsm_spec()
    run = _Run(create_job(spec, 1))
    for o in seq:
        if not _step(run, o):
            break
    return _finish(run, spec, max_steps)


def all_sequences(max_len=8):
    for n in range(max_len + 1):
        yield from itertools.product(OUTCOMES, repeat=n)


def sweep(max_len=8, spec=None, max_steps=200):
    """Every outcome sequence up to ``max_len``, depth first with shared prefixes.

    Yields ``(sequence, result)``; equivalent to calling :func:`drive_sequence`
    on each sequence of :func:`all_sequences`.
    """
    spec = spec or fsm_spec()
    stack = [((), _Run(create_job(spec, 1)), True)]
    while stack:
        seq, run, alive = stack.pop()
        if len(seq) < max_len:
            for o in reversed(OUTCOMES):
                child = run.clone()
                child_alive = alive and _step(child, o)
                stack.append((seq + (o,), child, child_alive))
        yield seq, _finish(run, spec, max_steps)


def timeline_shortfall_ms(n_by_kind, jobs, shares, b_hi_min, n_usable_cpus, ram):
    """Minute-stepped WRR timeline; returns shortfall per kind in integer ms.

    ``jobs`` are dicts with integer-minute ``remaining``, ``usage`` (kind ->
    Fraction), ``project`` and ``wss``. Priorities are exact Fractions and the
    run set is only re-chosen on minutes where some job has just finished.
    """
    remaining = {i: j["remaining"] for i, j in enumerate(jobs)}
    balance = {p: Fraction(0) for p in shares}
    total_share = sum(shares.values())
    rate = {p: Fraction(s) / total_share for p, s in shares.items()}
    base = Fraction(n_usable_cpus) + sum(Fraction(n) for k, n in n_by_kind.items() if k != "cpu")
    cap = Fraction(86400)
    shortfall = {k: Fraction(0) for k in n_by_kind}
    run = None
    since_decision = 0
    usage_since = {p: Fraction(0) for p in shares}
    minute = 0
    while True:
        if run is None or any(remaining[i] == 0 for i in run):
            # settle priorities for the interval since the last decision
            for p in shares:
                b = balance[p] + rate[p] * since_decision * 60 * base - usage_since[p] * 60
                balance[p] = max(-cap, min(cap, b))
                usage_since[p] = Fraction(0)
            since_decision = 0
            order = sorted((i for i in remaining if remaining[i] > 0),
                           key=lambda i: (-balance[jobs[i]["project"]], jobs[i]["project"], i))
            run = []
            used = {k: Fraction(0) for k in n_by_kind}
            cpu_only = Fraction(0)
            wss = 0
            for i in order:
                u = jobs[i]["usage"]
                trial = {k: used[k] + u.get(k, 0) for k in n_by_kind}
                gpu = any(k != "cpu" for k in u)
                trial_cpu_only = cpu_only + (0 if gpu else u.get("cpu", 0))
                ok = all(trial[k] <= n_by_kind[k] for k in n_by_kind if k != "cpu")
                ok = ok and trial_cpu_only <= n_usable_cpus and trial["cpu"] <= n_usable_cpus + 1
                ok = ok and wss + jobs[i]["wss"] <= ram
                if ok:
                    run.append(i)
                    used, cpu_only, wss = trial, trial_cpu_only, wss + jobs[i]["wss"]
            if not run:
                for k in n_by_kind:
                    shortfall[k] += n_by_kind[k] * max(0, b_hi_min - minute)
                break
        used = {k: Fraction(0) for k in n_by_kind}
        for i in run:
            for k, u in jobs[i]["usage"].items():
                used[k] += u
            usage_since[jobs[i]["project"]] += sum(jobs[i]["usage"].values())
        if minute < b_hi_min:
            for k in n_by_kind:
                shortfall[k] += max(Fraction(0), n_by_kind[k] - used[k])
        for i in run:
            remaining[i] -= 1
        since_decision += 1
        minute += 1
        if not any(remaining.values()):
            # idle for the rest of the buffer window
            for k in n_by_kind:
                shortfall[k] += n_by_kind[k] * max(0, b_hi_min - minute)
            break
    out = {}
    for k, v in shortfall.items():
        ms = v * 60_000
        assert ms.denominator == 1
        out[k] = int(ms)
    return out
