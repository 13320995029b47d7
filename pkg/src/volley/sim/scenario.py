"""Scenario schema, loading, overrides and canonical digests."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ScenarioError(ValueError):
    """A scenario failed to parse or validate; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Dist(_Model):
    """A scalar distribution with a finite mean."""

    kind: Literal["const", "uniform", "lognormal", "exponential"] = "const"
    value: float = 0.0
    low: float = 0.0
    high: float = 0.0
    mean: float = 1.0  # lognormal: mean of the underlying normal is chosen so E[x] = mean
    sigma: float = 0.0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError("uniform needs high >= low")
        if self.kind in ("lognormal", "exponential") and not self.mean > 0:
            raise ValueError(f"{self.kind} needs mean > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        for v in (self.value, self.low, self.high, self.mean, self.sigma):
            if not math.isfinite(v):
                raise ValueError("parameters must be finite")
        return self

    @classmethod
    def const(cls, v: float) -> "Dist":
        return cls(kind="const", value=v)

    def sample(self, rng) -> float:
        if self.kind == "const":
            return self.value
        if self.kind == "uniform":
            return rng.uniform(self.low, self.high)
        if self.kind == "exponential":
            return rng.expovariate(1.0 / self.mean)
        mu = math.log(self.mean) - self.sigma ** 2 / 2
        return rng.lognormvariate(mu, self.sigma)

    def expected(self) -> float:
        if self.kind == "const":
            return self.value
        if self.kind == "uniform":
            return (self.low + self.high) / 2
        return self.mean


def _dist(v) -> Dist:
    if isinstance(v, bool):
        return v
    if isinstance(v, (int, float)):
        return Dist.const(float(v))
    if isinstance(v, str):
        try:
            return Dist.const(float(v))  # YAML reads 1.0e9 as a string
        except ValueError:
            return v
    return v


class Availability(_Model):
    always_on: bool = True
    mean_on_seconds: float = Field(8 * 3600.0, gt=0)
    mean_off_seconds: float = Field(8 * 3600.0, gt=0)
    departure_rate: float = Field(0.0, ge=0)  # per-second hazard of leaving for good


class ReliabilityMix(_Model):
    faulty_fraction: float = Field(0.0, ge=0, le=1)
    faulty_error_prob: float = Field(0.0, ge=0, le=1)
    faulty_crash_prob: float = Field(0.0, ge=0, le=1)
    malicious_fraction: float = Field(0.0, ge=0, le=1)
    malicious_prob: float = Field(1.0, ge=0, le=1)
    collusion: bool = False
    honest_crash_prob: float = Field(0.0, ge=0, le=1)

    @model_validator(mode="after")
    def _check(self):
        if self.faulty_fraction + self.malicious_fraction > 1:
            raise ValueError("faulty_fraction + malicious_fraction must be <= 1")
        return self


class GpuSpec(_Model):
    kind: str = "gpu"
    fraction: float = Field(1.0, ge=0, le=1)  # share of hosts that have one
    count: int = Field(1, ge=1)
    flops: Dist = Dist.const(1e11)
    efficiency: Dist = Dist.const(1.0)
    driver_version: int = 0

    @field_validator("flops", "efficiency", mode="before")
    @classmethod
    def _coerce(cls, v):
        return _dist(v)


class HostPopulation(_Model):
    count: int = Field(1, ge=0)
    cpus: int = Field(1, ge=1)
    cpu_flops: Dist = Dist.const(5e9)
    efficiency: Dist = Dist.const(1.0)
    ram_bytes: float = Field(8e9, gt=0)
    free_disk_bytes: float = Field(1e11, gt=0)
    os_mix: dict[str, float] = Field(default_factory=lambda: {"linux": 1.0})
    vendor_mix: dict[str, float] = Field(default_factory=lambda: {"intel": 1.0})
    gpu: GpuSpec | None = None
    availability: Availability = Availability()
    reliability: ReliabilityMix = ReliabilityMix()
    keyword_prefs: dict[str, Literal["yes", "no"]] = Field(default_factory=dict)

    @field_validator("cpu_flops", "efficiency", mode="before")
    @classmethod
    def _coerce(cls, v):
        return _dist(v)


class VersionSpec(_Model):
    usage: dict[str, float] = Field(default_factory=lambda: {"cpu": 1.0})
    os: list[str] | None = None
    min_driver_version: int = 0

    @field_validator("usage")
    @classmethod
    def _usage(cls, v):
        if not v or any(u <= 0 for u in v.values()):
            raise ValueError("usage needs at least one resource, each > 0")
        return v


class AppSpec(_Model):
    name: str = "app"
    versions: list[VersionSpec] = Field(default_factory=lambda: [VersionSpec()], min_length=1)


class JobStream(_Model):
    batch_size: int = Field(10, ge=1)
    batch_interval_seconds: float = Field(3600.0, gt=0)
    max_batches: int | None = Field(None, ge=0)
    min_backlog: int = Field(0, ge=0)  # top-up so unsent work never drops below this
    total_jobs: int | None = Field(None, ge=0)
    est_flop_count: Dist = Dist.const(3.6e13)
    true_flop_ratio: Dist = Dist.const(1.0)  # true_flop_count = est_flop_count * ratio
    size_classes: int = Field(1, ge=1)
    keywords: list[str] = Field(default_factory=list)

    @field_validator("est_flop_count", "true_flop_ratio", mode="before")
    @classmethod
    def _coerce(cls, v):
        return _dist(v)


class ProjectSpec(_Model):
    name: str
    share: float = Field(1.0, gt=0)
    delay_bound_seconds: float = Field(gt=0)
    min_quorum: int = Field(1, ge=1)
    init_ninstances: int = Field(1, ge=1)
    max_error_instances: int = Field(3, ge=0)
    max_success_instances: int = Field(6, ge=1)
    apps: list[AppSpec] = Field(default_factory=lambda: [AppSpec()], min_length=1)
    jobs: JobStream = JobStream()

    @model_validator(mode="after")
    def _check(self):
        if self.init_ninstances < self.min_quorum:
            raise ValueError("init_ninstances must be >= min_quorum")
        if self.max_success_instances < self.min_quorum:
            raise ValueError("max_success_instances must be >= min_quorum")
        return self


class ClientPrefs(_Model):
    n_usable_cpus: int | None = Field(None, ge=1)
    throttle_duty_cycle: float = Field(1.0, gt=0, le=1)
    buffer_lo_seconds: float = Field(3600.0, gt=0)
    buffer_hi_seconds: float = Field(4 * 3600.0, gt=0)
    max_ram_fraction: float = Field(0.9, gt=0, le=1)
    poll_seconds: float = Field(1800.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.buffer_hi_seconds < self.buffer_lo_seconds:
            raise ValueError("buffer_hi_seconds must be >= buffer_lo_seconds")
        return self


class ScoreWeightsSpec(_Model):
    keyword: float = 1.0
    allocation: float = 1.0
    skipped: float = 0.25
    locality: float = 2.0
    size: float = 0.5


class PolicySpec(_Model):
    edf_enabled: bool = True
    adaptive_replication: bool = False
    replication_threshold: int = Field(10, ge=0)
    score_weights: ScoreWeightsSpec = ScoreWeightsSpec()
    hr_level: Literal["none", "coarse", "fine"] = "none"
    homogeneous_app_version: bool = False
    cache_size: int = Field(1000, ge=1)
    timeslice_seconds: float = Field(3600.0, gt=0)
    checkpoint_seconds: float = Field(600.0, gt=0)
    leave_in_memory: bool = False
    report_margin: float = Field(0.1, ge=0)
    report_batch: int = Field(8, ge=1)
    fuzzy_tolerance: float | None = Field(None, gt=0)
    timeout_counts_as_error: bool = False
    purge_grace_seconds: float = Field(3 * 86400.0, ge=0)


class Scenario(_Model):
    seed: int = 1
    duration_seconds: float = Field(86400.0, gt=0)
    warmup_seconds: float = Field(0.0, ge=0)
    warmup_jobs: int = Field(0, ge=0)  # jobs with id <= this are excluded from overhead metrics
    drain: bool = False  # after duration: stop new work and run until in-flight deadlines pass
    metrics_interval_seconds: float = Field(86400.0, gt=0)
    hosts: HostPopulation = HostPopulation()
    projects: list[ProjectSpec] = Field(min_length=1)
    client: ClientPrefs = ClientPrefs()
    policy: PolicySpec = PolicySpec()

    @field_validator("projects")
    @classmethod
    def _unique(cls, v):
        names = [p.name for p in v]
        if len(set(names)) != len(names):
            raise ValueError("project names must be unique")
        return v


# ---------------------------------------------------------------------------
# loading


def _loc_path(loc) -> str:
    out = ""
    for part in loc:
        if isinstance(part, int):
            out += f"[{part}]"
        else:
            out += ("." if out else "") + str(part)
    return out


def from_dict(data: Any) -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        raise ScenarioError(_loc_path(err["loc"]), err["msg"]) from None


def load_scenario(path: str | Path, overrides: list[str] | None = None) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioError(str(path), f"cannot read: {e.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ScenarioError(str(path), f"parse error: {e}") from None
    if not isinstance(data, dict):
        raise ScenarioError(str(path), "top level must be a mapping")
    for item in overrides or ():
        data = apply_override(data, item)
    return from_dict(data)


_PART = re.compile(r"([^.\[\]]+)|\[(\d+)\]")


def _split_key(key: str) -> list[str | int]:
    parts: list[str | int] = []
    pos = 0
    for m in _PART.finditer(key):
        if m.start() != pos and key[pos:m.start()] != ".":
            raise ScenarioError(key, "malformed override key")
        parts.append(m.group(1) if m.group(1) is not None else int(m.group(2)))
        pos = m.end()
    if pos != len(key) or not parts:
        raise ScenarioError(key, "malformed override key")
    return parts


def apply_override(data: dict, item: str) -> dict:
    """Apply ``key.path[0].leaf=value``; the value is parsed as YAML."""
    if "=" not in item:
        raise ScenarioError(item, "override must look like key=value")
    key, raw = item.split("=", 1)
    parts = _split_key(key.strip())
    data = copy.deepcopy(data)
    node: Any = data
    for i, part in enumerate(parts[:-1]):
        nxt = parts[i + 1]
        try:
            if isinstance(part, int):
                node = node[part]
            else:
                node = node.setdefault(part, [] if isinstance(nxt, int) else {})
        except (IndexError, KeyError, TypeError, AttributeError):
            raise ScenarioError(_loc_path(parts[: i + 1]), "no such key for override") from None
    last = parts[-1]
    try:
        node[last] = yaml.safe_load(raw)
    except (IndexError, TypeError):
        raise ScenarioError(_loc_path(parts), "no such key for override") from None
    return data


def canonical(s: Scenario) -> dict:
    return s.model_dump(mode="json")


def emit(s: Scenario) -> str:
    return yaml.safe_dump(canonical(s), sort_keys=True)


def digest(s: Scenario) -> str:
    blob = json.dumps(canonical(s), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
