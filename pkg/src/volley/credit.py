"""Device-neutral credit: peak FLOP counts, normalization and grant."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .core import AppVersion, Host, RunningStats

# One credit unit: a day on a CPU whose Whetstone benchmark is 1 GFLOPS.
COBBLESTONE_FLOPS = 1e9 * 86400
NORM_SAMPLE_THRESHOLD = 10
RAC_HALF_LIFE = 7 * 86400.0


class Pfc(NamedTuple):
    flops: float
    anomalous: bool


def pfc(runtime: float, version: AppVersion, host: Host) -> Pfc:
    """Peak FLOP count of a completed instance.

    Non-positive runtimes yield zero and are flagged so callers can skip the
    sample instead of polluting the statistics.
    """
    if not runtime > 0:
        return Pfc(0.0, True)
    total = 0.0
    for kind, u in version.resource_usage.items():
        total += runtime * u * host.resource(kind).peak_flops_per_instance
    return Pfc(total, False)


class PfcStats:
    """Running means of PFC / est_flop_count per app version and per (host, version)."""

    def __init__(self, threshold: int = NORM_SAMPLE_THRESHOLD):
        self.threshold = threshold
        self.by_version: dict[int, RunningStats] = {}
        self.by_host_version: dict[tuple[int, int], RunningStats] = {}
        self._app_of: dict[int, str] = {}

    def update(self, host_id: int, version: AppVersion, pfc_flops: float, est_flop_count: float) -> None:
        ratio = pfc_flops / est_flop_count
        self._app_of[version.id] = version.app_id
        self.by_version.setdefault(version.id, RunningStats()).add(ratio)
        self.by_host_version.setdefault((host_id, version.id), RunningStats()).add(ratio)

    def _mean(self, stats: RunningStats | None) -> float | None:
        if stats is None or stats.count < self.threshold:
            return None
        return stats.mean

    def version_norm(self, version: AppVersion) -> float:
        mine = self._mean(self.by_version.get(version.id))
        if mine is None:
            return 1.0
        peers = [self._mean(s) for vid, s in self.by_version.items()
                 if self._app_of.get(vid) == version.app_id]
        lowest = min(m for m in peers if m is not None)
        return lowest / mine

    def host_norm(self, host_id: int, version: AppVersion) -> float:
        v = self._mean(self.by_version.get(version.id))
        hv = self._mean(self.by_host_version.get((host_id, version.id)))
        if v is None or hv is None:
            return 1.0
        return v / hv


def claimed_credit(pfc_flops: float, host_id: int, version: AppVersion, stats: PfcStats) -> float:
    """PFC scaled to the most efficient version and to the version's average host."""
    norm = stats.version_norm(version) * stats.host_norm(host_id, version)
    return pfc_flops * norm / COBBLESTONE_FLOPS


def granted_credit(claims: Sequence[float]) -> float:
    """Outlier-resistant average: cap each claim at twice the median, then average."""
    if not claims:
        raise ValueError("no claims to grant from")
    cap = 2.0 * statistics.median(claims)
    return math.fsum(min(c, cap) for c in claims) / len(claims)


@dataclass(frozen=True)
class CreditGrant:
    job_id: int
    granted: float
    claimed: tuple[float, ...]


@dataclass
class _Account:
    total: float = 0.0
    decayed: float = 0.0
    last: float = 0.0


@dataclass
class CreditLedger:
    """Total and recent-average credit per account (host or project).

    Recent average credit is an exponentially decayed sum scaled to credit per
    day, so a steady earner converges to their daily rate.
    """

    half_life: float = RAC_HALF_LIFE
    accounts: dict[str, _Account] = field(default_factory=dict)

    def grant(self, key: str, amount: float, now: float) -> None:
        acct = self.accounts.setdefault(key, _Account(last=now))
        self._decay(acct, now)
        acct.total += amount
        acct.decayed += amount

    def _decay(self, acct: _Account, now: float) -> None:
        if now > acct.last:
            acct.decayed *= math.exp(-(now - acct.last) * math.log(2) / self.half_life)
            acct.last = now

    def total(self, key: str) -> float:
        acct = self.accounts.get(key)
        return acct.total if acct else 0.0

    def recent_average(self, key: str, now: float) -> float:
        acct = self.accounts.get(key)
        if acct is None:
            return 0.0
        self._decay(acct, now)
        return acct.decayed * math.log(2) / self.half_life * 86400

    def keys(self) -> Iterable[str]:
        return self.accounts.keys()
