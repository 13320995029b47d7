"""Run metrics: accumulated by the engine, rendered as sorted key=value text."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable


def _quantile(xs: list[float], q: float) -> float:
    if not xs:
        return 0.0
    xs = sorted(xs)
    pos = q * (len(xs) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def _cv(xs: Iterable[float]) -> float:
    xs = list(xs)
    if len(xs) < 2:
        return 0.0
    m = statistics.fmean(xs)
    return statistics.pstdev(xs) / m if m else 0.0


@dataclass
class Collector:
    """Raw tallies gathered while the simulation runs."""

    duration: float
    warmup_seconds: float = 0.0
    warmup_jobs: int = 0
    compute: dict[str, float] = field(default_factory=dict)  # cpu-equivalent seconds per project
    completions: int = 0
    late_completions: int = 0
    stretch: list[float] = field(default_factory=list)
    dispatch_latency: list[float] = field(default_factory=list)
    claims: dict[int, list[float]] = field(default_factory=dict)  # per host, in order
    grants: dict[tuple[str, int], set[float]] = field(default_factory=dict)
    jobs_succeeded: int = 0
    jobs_failed: int = 0
    wrong_accepted: int = 0
    counted_jobs: int = 0
    counted_dispatched: int = 0
    batch_created: dict[tuple[str, int], float] = field(default_factory=dict)
    batch_pending: dict[tuple[str, int], int] = field(default_factory=dict)
    batch_done: dict[tuple[str, int], float] = field(default_factory=dict)
    credit_total: dict[str, float] = field(default_factory=dict)
    instances_created: int = 0
    instances_resolved: int = 0

    def add_compute(self, project: str, t: float, seconds: float) -> None:
        if t >= self.warmup_seconds:
            self.compute[project] = self.compute.get(project, 0.0) + seconds

    def finish(self) -> "Metrics":
        total = sum(self.compute.values())
        shares = {p: (v / total if total else 0.0) for p, v in sorted(self.compute.items())}
        # mean claim per host over the second half of its history, after norms settle
        per_host = [statistics.fmean(c[len(c) // 2:]) for c in self.claims.values() if len(c) >= 2]
        turnaround = [self.batch_done[b] - self.batch_created[b] for b in sorted(self.batch_done)]
        days = self.duration / 86400.0
        decided = self.jobs_succeeded
        return Metrics(
            throughput_per_day=self.jobs_succeeded / days if days else 0.0,
            jobs_succeeded=self.jobs_succeeded,
            jobs_failed=self.jobs_failed,
            replication_overhead=(self.counted_dispatched / self.counted_jobs) if self.counted_jobs else 0.0,
            wrong_accepted=self.wrong_accepted,
            wrong_accept_rate=self.wrong_accepted / decided if decided else 0.0,
            completions=self.completions,
            deadline_misses=self.late_completions,
            deadline_miss_rate=self.late_completions / self.completions if self.completions else 0.0,
            shares=shares,
            turnaround_mean=statistics.fmean(turnaround) if turnaround else 0.0,
            turnaround_p95=_quantile(turnaround, 0.95),
            batches_done=len(turnaround),
            credit_claim_cv=_cv(per_host),
            credit_grant_mismatches=sum(1 for g in self.grants.values() if len(g) > 1),
            credit_total=dict(sorted(self.credit_total.items())),
            dispatch_latency_mean=statistics.fmean(self.dispatch_latency) if self.dispatch_latency else 0.0,
            dispatch_latency_p95=_quantile(self.dispatch_latency, 0.95),
            stretch_mean=statistics.fmean(self.stretch) if self.stretch else 0.0,
            instances_created=self.instances_created,
            instances_resolved=self.instances_resolved,
        )


@dataclass
class Metrics:
    throughput_per_day: float
    jobs_succeeded: int
    jobs_failed: int
    replication_overhead: float
    wrong_accepted: int
    wrong_accept_rate: float
    completions: int
    deadline_misses: int
    deadline_miss_rate: float
    shares: dict[str, float]
    turnaround_mean: float
    turnaround_p95: float
    batches_done: int
    credit_claim_cv: float
    credit_grant_mismatches: int
    credit_total: dict[str, float]
    dispatch_latency_mean: float
    dispatch_latency_p95: float
    stretch_mean: float
    instances_created: int
    instances_resolved: int

    def flat(self) -> dict[str, float | int]:
        out: dict[str, float | int] = {}
        for k, v in self.__dict__.items():
            if isinstance(v, dict):
                for sub, x in v.items():
                    out[f"{k}.{sub}"] = x
            else:
                out[k] = v
        return dict(sorted(out.items()))

    def to_text(self) -> str:
        lines = []
        for k, v in self.flat().items():
            lines.append(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.6f}")
        return "\n".join(lines) + "\n"
