"""Shared domain model: hosts, processing resources, app versions, job specs.

Also houses the linear-bounded allocation update and homogeneous-redundancy
classification, both of which are consumed by the client and server policies.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple

CPU = "cpu"

DEFAULT_BALANCE_CAP = 86400.0


class Record(NamedTuple):
    """A trace record emitted by a policy step; the simulator stamps the time."""

    event: str
    fields: dict[str, Any]


class IncompatibleVersionError(ValueError):
    """An app version was evaluated against a host it cannot run on."""


class InvalidSpecError(ValueError):
    """A job spec violates its invariants."""


@dataclass(frozen=True)
class ProcessingResource:
    kind: str
    instance_count: int
    peak_flops_per_instance: float
    availability_fraction: float = 1.0

    def __post_init__(self):
        if self.instance_count < 1:
            raise ValueError(f"{self.kind}: instance_count must be >= 1")
        if self.peak_flops_per_instance <= 0:
            raise ValueError(f"{self.kind}: peak_flops_per_instance must be > 0")
        if not 0.0 <= self.availability_fraction <= 1.0:
            raise ValueError(f"{self.kind}: availability_fraction must be in [0, 1]")

    @property
    def is_cpu(self) -> bool:
        return self.kind == CPU


class Reliability(enum.Enum):
    HONEST = "honest"
    FAULTY = "faulty"
    MALICIOUS = "malicious"


@dataclass(frozen=True)
class ReliabilityProfile:
    """How a host's results go wrong.

    ``wrong_prob`` is the chance a completed job returns an incorrect result;
    ``crash_prob`` is the chance the app errors out instead of finishing.
    """

    kind: Reliability = Reliability.HONEST
    wrong_prob: float = 0.0
    crash_prob: float = 0.0

    @classmethod
    def honest(cls) -> "ReliabilityProfile":
        return cls()

    @classmethod
    def faulty(cls, error_prob: float, crash_prob: float = 0.0) -> "ReliabilityProfile":
        return cls(Reliability.FAULTY, error_prob, crash_prob)

    @classmethod
    def malicious(cls, wrong_result_prob: float) -> "ReliabilityProfile":
        return cls(Reliability.MALICIOUS, wrong_result_prob, 0.0)


@dataclass(frozen=True)
class ComputingPrefs:
    n_usable_cpus: int = 1
    throttle_duty_cycle: float = 1.0
    buffer_lo_seconds: float = 3600.0
    buffer_hi_seconds: float = 4 * 3600.0
    max_ram_fraction: float = 0.9

    def __post_init__(self):
        if self.n_usable_cpus < 1:
            raise ValueError("n_usable_cpus must be >= 1")
        if not 0.0 < self.throttle_duty_cycle <= 1.0:
            raise ValueError("throttle_duty_cycle must be in (0, 1]")
        if not 0.0 < self.buffer_lo_seconds <= self.buffer_hi_seconds:
            raise ValueError("need 0 < buffer_lo_seconds <= buffer_hi_seconds")
        if not 0.0 < self.max_ram_fraction <= 1.0:
            raise ValueError("max_ram_fraction must be in (0, 1]")


@dataclass(frozen=True)
class Host:
    id: int
    resources: tuple[ProcessingResource, ...]
    os_tag: str = "linux"
    cpu_vendor_tag: str = "intel"
    cpu_model_tag: str = "generic"
    ram_bytes: float = 8e9
    free_disk_bytes: float = 1e11
    driver_version: int = 0
    keyword_prefs: Mapping[str, str] = field(default_factory=dict)
    sticky_files: frozenset[str] = frozenset()
    reliability: ReliabilityProfile = ReliabilityProfile()
    prefs: ComputingPrefs = ComputingPrefs()

    def __post_init__(self):
        cpus = [r for r in self.resources if r.is_cpu]
        if len(cpus) != 1:
            raise ValueError(f"host {self.id}: exactly one CPU resource required")
        if self.ram_bytes <= 0:
            raise ValueError(f"host {self.id}: ram_bytes must be > 0")
        if self.prefs.n_usable_cpus > cpus[0].instance_count:
            raise ValueError(f"host {self.id}: n_usable_cpus exceeds CPU count")
        kinds = [r.kind for r in self.resources]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"host {self.id}: duplicate resource kind")

    @property
    def cpu(self) -> ProcessingResource:
        return next(r for r in self.resources if r.is_cpu)

    @property
    def coprocessors(self) -> tuple[ProcessingResource, ...]:
        return tuple(r for r in self.resources if not r.is_cpu)

    def resource(self, kind: str) -> ProcessingResource | None:
        for r in self.resources:
            if r.kind == kind:
                return r
        return None

    def usable_instances(self, kind: str) -> int:
        if kind == CPU:
            return self.prefs.n_usable_cpus
        r = self.resource(kind)
        return r.instance_count if r else 0

    def available_ram(self) -> float:
        return self.ram_bytes * self.prefs.max_ram_fraction


@dataclass(frozen=True)
class Compatibility:
    """Declarative stand-in for platform + plan-class checks."""

    os_allow: frozenset[str] | None = None
    required_kinds: frozenset[str] = frozenset()
    min_driver_version: int = 0

    def __call__(self, host: Host) -> bool:
        if self.os_allow is not None and host.os_tag not in self.os_allow:
            return False
        for kind in self.required_kinds:
            if host.resource(kind) is None:
                return False
        if self.required_kinds - {CPU} and host.driver_version < self.min_driver_version:
            return False
        return True


@dataclass(frozen=True)
class AppVersion:
    id: int
    app_id: str
    version_number: int
    resource_usage: Mapping[str, float]
    compatibility: Compatibility = Compatibility()

    def __post_init__(self):
        if not self.resource_usage:
            raise ValueError(f"app version {self.id}: empty resource_usage")
        for kind, u in self.resource_usage.items():
            if u <= 0:
                raise ValueError(f"app version {self.id}: usage of {kind} must be > 0")

    @property
    def primary_kind(self) -> str:
        """The coprocessor this version targets, or CPU for CPU-only versions."""
        gpus = sorted(k for k in self.resource_usage if k != CPU)
        return gpus[0] if gpus else CPU

    @property
    def is_cpu_only(self) -> bool:
        return self.primary_kind == CPU

    def usage(self, kind: str) -> float:
        return self.resource_usage.get(kind, 0.0)

    def runs_on(self, host: Host) -> bool:
        if not self.compatibility(host):
            return False
        return all(host.resource(k) is not None for k in self.resource_usage)


@dataclass(frozen=True)
class JobSpec:
    app_id: str
    est_flop_count: float
    max_flop_count: float
    delay_bound_seconds: float
    est_wss_bytes: float = 1e8
    disk_bound_bytes: float = 1e8
    min_quorum: int = 1
    init_ninstances: int = 1
    max_error_instances: int = 3
    max_success_instances: int = 6
    keywords: frozenset[str] = frozenset()
    input_files: frozenset[str] = frozenset()
    size_class: int = 0
    submitter_id: str = "default"
    # Ground truth for the simulator; scheduling code never reads it.
    true_flop_count: float | None = None

    def validate(self) -> None:
        if self.min_quorum < 1:
            raise InvalidSpecError("min_quorum must be >= 1")
        if self.init_ninstances < self.min_quorum:
            raise InvalidSpecError("init_ninstances must be >= min_quorum")
        if not self.est_flop_count > 0:
            raise InvalidSpecError("est_flop_count must be > 0")
        if self.max_flop_count < self.est_flop_count:
            raise InvalidSpecError("max_flop_count must be >= est_flop_count")
        if not self.delay_bound_seconds > 0:
            raise InvalidSpecError("delay_bound_seconds must be > 0")
        if self.max_error_instances < 0 or self.max_success_instances < self.min_quorum:
            raise InvalidSpecError("instance limits out of range")


@dataclass(frozen=True)
class AllocationState:
    balance: float = 0.0
    rate: float = 1.0
    cap: float = DEFAULT_BALANCE_CAP

    def __post_init__(self):
        if self.cap <= 0:
            raise ValueError("cap must be > 0")


def linear_bounded_update(
    state: AllocationState, elapsed: float, total_rate_base: float, usage: float
) -> AllocationState:
    """Grow the balance at ``rate * total_rate_base`` per second, spend ``usage``.

    The result is clamped to ``[-cap, cap]``; higher balance means higher priority.
    """
    elapsed = max(0.0, elapsed)
    usage = max(0.0, usage)
    b = state.balance + state.rate * elapsed * total_rate_base - usage
    b = min(state.cap, max(-state.cap, b))
    return AllocationState(b, state.rate, state.cap)


class HrLevel(enum.Enum):
    NONE = "none"
    COARSE = "coarse"
    FINE = "fine"


def hr_class(host: Host, level: HrLevel | str) -> str:
    """Homogeneous-redundancy equivalence class of ``host``."""
    level = HrLevel(level)
    if level is HrLevel.NONE:
        return "*"
    tags = [host.os_tag, host.cpu_vendor_tag]
    if level is HrLevel.FINE:
        tags.append(host.cpu_model_tag)
    # length-prefixed so the encoding is injective
    payload = "".join(f"{len(t)}:{t}" for t in tags)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def peak_flops_of(version: AppVersion, host: Host) -> float:
    """Sum over resources of usage times per-instance peak FLOPS."""
    if not version.runs_on(host):
        raise IncompatibleVersionError(
            f"app version {version.id} is not compatible with host {host.id}"
        )
    total = 0.0
    for kind, u in version.resource_usage.items():
        total += u * host.resource(kind).peak_flops_per_instance
    return total


class RunningStats:
    """Welford running mean and variance."""

    __slots__ = ("count", "mean", "m2")

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        if self.count < 2:
            return math.nan
        return self.m2 / (self.count - 1)

    def __repr__(self):
        return f"RunningStats(count={self.count}, mean={self.mean:.6g})"
