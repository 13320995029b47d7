import itertools
import math
import random
from dataclasses import dataclass

import pytest
from hypothesis import given, strategies as st

from volley.validation import (
    BITWISE,
    Comparator,
    ReplicationStats,
    check_quorum,
    equivalence_groups,
    equivalent,
    record_validation,
    should_replicate,
)


@dataclass
class R:
    id: int
    output_digest: tuple


class TestEquivalent:
    def test_identity(self):
        assert equivalent((1.0,), (1.0,), Comparator.fuzzy(1e-6))

    def test_fuzzy_tolerance(self):
        assert equivalent((1.0,), (1.0000005,), Comparator.fuzzy(1e-6))
        assert not equivalent((1.0,), (1.0000005,), Comparator.fuzzy(1e-8))

    def test_bitwise(self):
        assert not equivalent((1.0,), (1.1,), BITWISE)
        assert equivalent((1.0, 2.0), (1.0, 2.0), BITWISE)

    def test_length_mismatch(self):
        assert not equivalent((1.0,), (1.0, 1.0), Comparator.fuzzy(0.5))

    def test_fuzzy_needs_tolerance(self):
        with pytest.raises(ValueError):
            Comparator.fuzzy(0.0)

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4),
           st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=4),
           st.floats(1e-9, 0.5))
    def test_symmetric_reflexive(self, a, b, tol):
        c = Comparator.fuzzy(tol)
        assert equivalent(a, a, c)
        assert equivalent(a, b, c) == equivalent(b, a, c)


def brute_groups(results, c):
    """Transitive closure of the pairwise matrix by repeated relaxation."""
    ids = sorted(r.id for r in results)
    by_id = {r.id: r for r in results}
    label = {i: i for i in ids}
    changed = True
    while changed:
        changed = False
        for i, j in itertools.permutations(ids, 2):
            if equivalent(by_id[i].output_digest, by_id[j].output_digest, c):
                m = min(label[i], label[j])
                if label[i] != m or label[j] != m:
                    label[i] = label[j] = m
                    changed = True
    out = {}
    for i in ids:
        out.setdefault(label[i], []).append(i)
    return sorted(out.values())


class TestQuorum:
    def test_unanimous(self):
        assert check_quorum([R(4, (1.0,)), R(2, (1.0,))], BITWISE, 2) == 2

    def test_third_instance_breaks_tie(self):
        rs = [R(1, (1.0,)), R(2, (2.0,)), R(3, (1.0,))]
        assert check_quorum(rs, BITWISE, 2) == 1

    def test_no_majority(self):
        assert check_quorum([R(1, (1.0,)), R(2, (2.0,))], BITWISE, 2) is None

    def test_below_quorum(self):
        assert check_quorum([R(1, (1.0,))], BITWISE, 2) is None

    def test_singleton_quorum_one(self):
        assert check_quorum([R(7, (3.0,))], BITWISE, 1) == 7

    @given(st.lists(st.sampled_from([1.0, 1.0 + 4e-7, 1.0 + 8e-7, 2.0, 3.0]), min_size=1, max_size=6),
           st.randoms(use_true_random=False))
    def test_grouping_matches_brute_force_and_is_order_independent(self, values, rnd):
        c = Comparator.fuzzy(5e-7)
        rs = [R(i + 1, (v,)) for i, v in enumerate(values)]
        assert equivalence_groups(rs, c) == brute_groups(rs, c)
        shuffled = rs[:]
        rnd.shuffle(shuffled)
        assert check_quorum(shuffled, c, 1) == check_quorum(rs, c, 1)


class TestAdaptiveReplication:
    def test_record(self):
        s = ReplicationStats()
        assert record_validation(s, 1, 1, True).consecutive_valid(1, 1) == 1
        s.set(1, 1, 5)
        assert record_validation(s, 1, 1, True).consecutive_valid(1, 1) == 6
        s.set(1, 1, 5)
        assert record_validation(s, 1, 1, False).consecutive_valid(1, 1) == 0

    def test_below_threshold_always(self):
        s = ReplicationStats()
        rng = random.Random(0)
        assert all(should_replicate(s, 1, 1, rng) for _ in range(100))
        s.set(1, 1, 10)
        assert all(should_replicate(s, 1, 1, rng, threshold=10) for _ in range(100))

    def test_probability_k_over_n(self):
        s = ReplicationStats()
        s.set(1, 1, 100)
        rng = random.Random(1234)
        n = 10_000
        hits = sum(should_replicate(s, 1, 1, rng, threshold=10) for _ in range(n))
        p = 0.1
        sigma = math.sqrt(n * p * (1 - p))
        assert abs(hits - n * p) <= 3 * sigma
