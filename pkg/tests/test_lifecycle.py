import pytest

from oracles import ERROR, MATCH, MISMATCH, TIMEOUT, all_sequences, drive_sequence, fsm_spec
from volley.core import InvalidSpecError, JobSpec
from volley.lifecycle import (
    InstanceState,
    JobState,
    LifecycleConfig,
    Outcome,
    create_job,
    decide_replication,
    dispatch,
    on_deadline,
    on_report,
    purge_eligible,
    transition,
)

OK = (1.0,)


def started(spec=None, n=None):
    job = create_job(spec or fsm_spec(), 1)
    for k, inst in enumerate(job.instances[:n]):
        dispatch(job, inst, host_id=k + 1, version_id=1, now=0.0)
    return job


class TestCreate:
    def test_quorum_two(self):
        job = create_job(fsm_spec(2, 2), 1)
        assert [i.state for i in job.instances] == [InstanceState.UNSENT] * 2

    def test_extra_initial_instances(self):
        assert len(create_job(fsm_spec(2, 3), 1).instances) == 3

    def test_rejects_init_below_quorum(self):
        with pytest.raises(InvalidSpecError):
            create_job(JobSpec("a", 1, 1, 1, min_quorum=2, init_ninstances=1), 1)

    def test_deadline(self):
        job = started()
        assert job.instances[0].deadline == 1000.0


class TestDeadline:
    def test_timeout_creates_replacement(self):
        job = started()
        effects = on_deadline(job, job.instances[0], 1000.0)
        assert [e.event for e in effects] == ["instance_timeout"]
        transition(job, now=1000.0)
        assert len(job.instances) == 3
        assert job.count(InstanceState.TIMED_OUT) == 1

    def test_early_deadline_ignored(self):
        job = started()
        assert on_deadline(job, job.instances[0], 999.0) == []

    def test_after_failure_no_new_instance(self):
        job = started(fsm_spec(1, 2, max_error=0))
        on_report(job, job.instances[0], Outcome.error(), 5.0)
        transition(job, now=5.0)
        assert job.state is JobState.FAILED
        n = len(job.instances)
        on_deadline(job, job.instances[1], 1000.0)
        assert not job.needs_transition
        transition(job, now=1000.0)
        assert len(job.instances) == n
        assert job.instances[1].state is InstanceState.TIMED_OUT

    def test_late_success_is_validated(self):
        job = started()
        first, second = job.instances
        on_deadline(job, first, 1000.0)
        transition(job, now=1000.0)
        third = job.instances[2]
        dispatch(job, third, 3, 1, 1000.0)
        on_report(job, second, Outcome.ok(OK, 10), 1001.0)
        on_report(job, third, Outcome.ok(OK, 10), 1002.0)
        transition(job, now=1002.0)
        assert job.state is JobState.SUCCESS
        effects = on_report(job, first, Outcome.ok(OK, 10), 1500.0)
        assert first.state is InstanceState.SUCCESS and first.late
        assert first.validity is True
        assert effects[-1].event == "instance_validated"
        assert job.state is JobState.SUCCESS


class TestReport:
    def test_first_success_waits_for_quorum(self):
        job = started()
        on_report(job, job.instances[0], Outcome.ok(OK, 10), 5.0)
        effects = transition(job, now=5.0)
        assert job.state is JobState.ACTIVE
        assert not any(e.event.startswith("quorum") for e in effects)

    def test_errors_fail_job(self):
        job = create_job(fsm_spec(max_error=1), 1)
        for k in range(3):
            for inst in job.instances:
                if inst.state is InstanceState.UNSENT:
                    dispatch(job, inst, k * 10 + inst.id, 1, 0.0)
            live = [i for i in job.instances if i.state is InstanceState.IN_PROGRESS]
            on_report(job, live[0], Outcome.error(), 1.0)
            transition(job, now=1.0)
        assert job.state is JobState.FAILED
        assert job.fail_reason == "too_many_errors"

    def test_success_after_canonical_matching(self):
        job = started(fsm_spec(2, 3))
        a, b, c = job.instances
        on_report(job, a, Outcome.ok(OK, 1), 1.0)
        on_report(job, b, Outcome.ok(OK, 1), 1.0)
        transition(job, now=1.0)
        assert job.canonical_id == a.id
        on_report(job, c, Outcome.ok(OK, 1), 2.0)
        assert c.validity is True
        assert job.state is JobState.SUCCESS and job.canonical_id == a.id

    def test_success_after_canonical_wrong(self):
        job = started(fsm_spec(2, 3))
        a, b, c = job.instances
        on_report(job, a, Outcome.ok(OK, 1), 1.0)
        on_report(job, b, Outcome.ok(OK, 1), 1.0)
        transition(job, now=1.0)
        on_report(job, c, Outcome.ok((9.0,), 1), 2.0)
        assert c.validity is False

    def test_duplicate_report_ignored(self):
        job = started()
        inst = job.instances[0]
        on_report(job, inst, Outcome.ok(OK, 1), 1.0)
        assert on_report(job, inst, Outcome.error(), 2.0) == []
        assert inst.state is InstanceState.SUCCESS


class TestTransition:
    def test_two_equivalent_successes(self):
        job = started()
        for inst in job.instances:
            on_report(job, inst, Outcome.ok(OK, 1), 1.0)
        effects = transition(job, now=1.0)
        assert job.state is JobState.SUCCESS
        assert job.canonical_id == job.instances[0].id
        assert [e.event for e in effects] == ["quorum_reached", "job_success"]

    def test_disagreement_creates_third(self):
        job = started()
        on_report(job, job.instances[0], Outcome.ok((1.0,), 1), 1.0)
        on_report(job, job.instances[1], Outcome.ok((2.0,), 1), 1.0)
        transition(job, now=1.0)
        assert len(job.instances) == 3
        assert job.instances[2].state is InstanceState.UNSENT
        dispatch(job, job.instances[2], 3, 1, 2.0)
        on_report(job, job.instances[2], Outcome.ok((2.0,), 1), 3.0)
        transition(job, now=3.0)
        assert job.canonical_id == job.instances[1].id
        assert job.instances[0].validity is False

    def test_nondeterministic_failure(self):
        job = create_job(fsm_spec(2, 2, max_success=3), 1)
        v = 0.0
        while not job.terminal:
            for inst in job.instances:
                if inst.state is InstanceState.UNSENT:
                    dispatch(job, inst, inst.id, 1, 0.0)
            inst = next(i for i in job.instances if i.state is InstanceState.IN_PROGRESS)
            v += 1
            on_report(job, inst, Outcome.ok((v,), 1), 1.0)
            transition(job, now=1.0)
        assert job.state is JobState.FAILED
        assert job.fail_reason == "nondeterministic"
        assert job.count(InstanceState.SUCCESS) == 4

    def test_idempotent(self):
        job = started()
        on_report(job, job.instances[0], Outcome.ok((1.0,), 1), 1.0)
        on_report(job, job.instances[1], Outcome.ok((2.0,), 1), 1.0)
        transition(job, now=1.0)
        snapshot = [(i.id, i.state) for i in job.instances]
        assert transition(job, now=2.0) == []
        assert [(i.id, i.state) for i in job.instances] == snapshot

    def test_unspent_cancelled_on_success(self):
        job = create_job(fsm_spec(2, 3), 1)
        a, b, c = job.instances
        dispatch(job, a, 1, 1, 0.0)
        dispatch(job, b, 2, 1, 0.0)
        on_report(job, a, Outcome.ok(OK, 1), 1.0)
        on_report(job, b, Outcome.ok(OK, 1), 1.0)
        transition(job, now=1.0)
        assert c.state is InstanceState.CANCELLED

    def test_timeouts_as_errors_flag(self):
        cfg = LifecycleConfig(timeout_counts_as_error=True)
        job = started(fsm_spec(2, 2, max_error=0))
        on_deadline(job, job.instances[0], 1000.0)
        transition(job, now=1000.0, config=cfg)
        assert job.state is JobState.FAILED

    def test_locks_fixed_by_first_dispatch(self):
        job = create_job(fsm_spec(), 1)
        dispatch(job, job.instances[0], 1, 7, 0.0, hr_class="A", lock_version=True)
        dispatch(job, job.instances[1], 2, 8, 0.0, hr_class="B", lock_version=True)
        assert (job.hr_class_lock, job.app_version_lock) == ("A", 7)

    def test_adaptive_unreplicated(self):
        job = create_job(fsm_spec(), 1, defer_replication=True)
        assert len(job.instances) == 1
        dispatch(job, job.instances[0], 1, 1, 0.0)
        decide_replication(job, False)
        transition(job, now=0.0)
        assert len(job.instances) == 1
        on_report(job, job.instances[0], Outcome.ok(OK, 1), 1.0)
        transition(job, now=1.0)
        assert job.state is JobState.SUCCESS

    def test_adaptive_replicated(self):
        job = create_job(fsm_spec(), 1, defer_replication=True)
        dispatch(job, job.instances[0], 1, 1, 0.0)
        decide_replication(job, True)
        transition(job, now=0.0)
        assert len(job.instances) == 2


class TestPurge:
    def test_active(self):
        assert not purge_eligible(create_job(fsm_spec(), 1), 3600, 1e9)

    def test_after_grace(self):
        job = started()
        for inst in job.instances:
            on_report(job, inst, Outcome.ok(OK, 1), 100.0)
        transition(job, now=100.0)
        assert purge_eligible(job, 3600, 5000)
        assert not purge_eligible(job, 3600, 3000)

    def test_unresolved_instance_blocks(self):
        job = started(fsm_spec(2, 3))
        a, b, c = job.instances
        on_report(job, a, Outcome.ok(OK, 1), 100.0)
        on_report(job, b, Outcome.ok(OK, 1), 100.0)
        transition(job, now=100.0)
        assert c.state is InstanceState.IN_PROGRESS
        assert not purge_eligible(job, 3600, 1e6)


@pytest.mark.parametrize("seq", [
    (), (MATCH,), (MISMATCH, MISMATCH, MATCH), (ERROR,) * 4, (TIMEOUT,) * 8,
    (MISMATCH,) * 8, (MATCH, TIMEOUT, ERROR, MISMATCH, MATCH),
])
def test_selected_sequences_terminate(seq):
    r = drive_sequence(seq)
    assert r["terminal"] and not r["stalled"]
    assert r["created_after_terminal"] == 0
    assert r["n_instances"] <= r["bound"]


def test_exhaustive_short_sequences():
    # length <= 5 here; the acceptance suite runs the full length-8 sweep
    for seq in all_sequences(5):
        r = drive_sequence(seq)
        assert r["terminal"], seq
        assert r["created_after_terminal"] == 0, seq
        assert r["n_instances"] <= r["bound"], seq


def test_replay_is_idempotent():
    job = started()
    a, b = job.instances
    on_report(job, a, Outcome.ok(OK, 1), 1.0)
    on_deadline(job, b, 1000.0)
    transition(job, now=1000.0)
    before = [(i.id, i.state, i.validity) for i in job.instances]
    on_report(job, a, Outcome.ok(OK, 1), 1.0)
    on_deadline(job, b, 1000.0)
    transition(job, now=1000.0)
    assert [(i.id, i.state, i.validity) for i in job.instances] == before
