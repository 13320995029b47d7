"""Result comparison, quorum selection and adaptive replication bookkeeping."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

DEFAULT_REPLICATION_THRESHOLD = 10


class CompareMode(enum.Enum):
    BITWISE = "bitwise"
    FUZZY = "fuzzy"


@dataclass(frozen=True)
class Comparator:
    mode: CompareMode = CompareMode.BITWISE
    tolerance: float = 0.0

    def __post_init__(self):
        if self.mode is CompareMode.FUZZY and not self.tolerance > 0:
            raise ValueError("fuzzy comparison needs tolerance > 0")

    @classmethod
    def fuzzy(cls, tolerance: float) -> "Comparator":
        return cls(CompareMode.FUZZY, tolerance)


BITWISE = Comparator()


def equivalent(a: Sequence[float], b: Sequence[float], c: Comparator = BITWISE) -> bool:
    """Whether two output digests agree under comparator ``c``.

    Fuzzy mode compares componentwise relative difference, measured against the
    larger magnitude of the pair so the relation stays symmetric.
    """
    if len(a) != len(b):
        return False
    if c.mode is CompareMode.BITWISE:
        return tuple(a) == tuple(b)
    for x, y in zip(a, b):
        if x == y:
            continue
        scale = max(abs(x), abs(y))
        if abs(x - y) > c.tolerance * scale:
            return False
    return True


class Reported(Protocol):
    id: int
    output_digest: Sequence[float]


def equivalence_groups(results: Iterable[Reported], c: Comparator = BITWISE) -> list[list[int]]:
    """Partition results into single-link equivalence groups of instance ids.

    Groups come back sorted by their smallest id; members sorted ascending.
    """
    items = sorted(results, key=lambda r: r.id)
    if c.mode is CompareMode.BITWISE:
        by_digest: dict[tuple, list[int]] = {}
        for r in items:
            by_digest.setdefault(tuple(r.output_digest), []).append(r.id)
        return sorted(by_digest.values())
    parent = list(range(len(items)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            if equivalent(items[i].output_digest, items[j].output_digest, c):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(items):
        groups.setdefault(find(i), []).append(r.id)
    return [groups[k] for k in sorted(groups)]


def majority_group(successes: Sequence[Reported], c: Comparator = BITWISE) -> list[int] | None:
    """Ids of the strict-majority equivalence group, if there is one."""
    if not successes:
        return None
    best = max(equivalence_groups(successes, c), key=len)
    return best if 2 * len(best) > len(successes) else None


def check_quorum(successes: Sequence[Reported], c: Comparator, min_quorum: int) -> int | None:
    """Canonical instance id if a strict majority of ``successes`` agree.

    The canonical instance is the lowest id in the majority group.
    """
    if len(successes) < min_quorum:
        return None
    group = majority_group(successes, c)
    return group[0] if group else None


class ReplicationStats:
    """Consecutive-validated counts per (host, app version)."""

    def __init__(self):
        self._n: dict[tuple[int, int], int] = {}

    def consecutive_valid(self, host_id: int, version_id: int) -> int:
        return self._n.get((host_id, version_id), 0)

    def set(self, host_id: int, version_id: int, n: int) -> None:
        self._n[(host_id, version_id)] = n

    def __len__(self):
        return len(self._n)


def record_validation(stats: ReplicationStats, host_id: int, version_id: int, valid: bool) -> ReplicationStats:
    n = stats.consecutive_valid(host_id, version_id)
    stats.set(host_id, version_id, n + 1 if valid else 0)
    return stats


def replication_probability(n: int, threshold: int = DEFAULT_REPLICATION_THRESHOLD) -> float:
    if n <= threshold:
        return 1.0
    return threshold / n


def should_replicate(
    stats: ReplicationStats,
    host_id: int,
    version_id: int,
    rng,
    threshold: int = DEFAULT_REPLICATION_THRESHOLD,
) -> bool:
    """Decide whether a job sent to (host, version) needs a second opinion.

    Always replicates until the pair has more than ``threshold`` consecutive
    validated results; after that with probability ``threshold / N``.
    """
    p = replication_probability(stats.consecutive_valid(host_id, version_id), threshold)
    if p >= 1.0:
        return True
    return rng.random() < p
