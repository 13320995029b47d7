import pytest
from hypothesis import given, strategies as st

from volley.core import (
    CPU,
    AllocationState,
    AppVersion,
    Compatibility,
    ComputingPrefs,
    Host,
    IncompatibleVersionError,
    InvalidSpecError,
    JobSpec,
    ProcessingResource,
    hr_class,
    linear_bounded_update,
    peak_flops_of,
)


def make_host(hid=1, cpu_flops=5e9, ncpu=4, gpu_flops=None, **kw):
    res = [ProcessingResource(CPU, ncpu, cpu_flops)]
    if gpu_flops:
        res.append(ProcessingResource("nvidia", 1, gpu_flops))
    return Host(hid, tuple(res), **kw)


class TestLinearBounded:
    def test_growth(self):
        s = linear_bounded_update(AllocationState(0.0, 0.5, 1000), 100, 1, 0)
        assert s.balance == 50

    def test_clamp_at_cap(self):
        s = linear_bounded_update(AllocationState(0.0, 1.0, 1000), 1e9, 1, 0)
        assert s.balance == 1000

    def test_spend(self):
        s = linear_bounded_update(AllocationState(50.0, 0.0, 1000), 10, 1, 80)
        assert s.balance == -30

    def test_negative_inputs_clamped(self):
        s = linear_bounded_update(AllocationState(5.0, 1.0, 1000), -10, 1, -3)
        assert s.balance == 5

    @given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6)), max_size=50),
           st.floats(0, 1), st.floats(1, 1e5))
    def test_never_exceeds_cap(self, steps, rate, cap):
        s = AllocationState(0.0, rate, cap)
        for elapsed, usage in steps:
            s = linear_bounded_update(s, elapsed, 1.0, usage)
            assert abs(s.balance) <= cap

    @given(st.lists(st.floats(0, 1e4), min_size=1, max_size=30))
    def test_rate_ordering_preserved_without_usage(self, gaps):
        rates = [0.5, 0.3, 0.2]
        states = [AllocationState(0.0, r, 86400) for r in rates]
        for dt in gaps:
            states = [linear_bounded_update(s, dt, 1.0, 0.0) for s in states]
            b = [s.balance for s in states]
            assert b[0] >= b[1] >= b[2]


class TestHrClass:
    a = make_host(1, os_tag="win", cpu_vendor_tag="intel", cpu_model_tag="i7")
    b = make_host(2, os_tag="win", cpu_vendor_tag="intel", cpu_model_tag="i5")
    c = make_host(3, os_tag="linux", cpu_vendor_tag="amd", cpu_model_tag="ryzen")

    def test_coarse_ignores_model(self):
        assert hr_class(self.a, "coarse") == hr_class(self.b, "coarse")

    def test_fine_uses_model(self):
        assert hr_class(self.a, "fine") != hr_class(self.b, "fine")

    def test_none_is_universal(self):
        assert hr_class(self.a, "none") == hr_class(self.c, "none")

    def test_coarse_distinguishes_os(self):
        assert hr_class(self.a, "coarse") != hr_class(self.c, "coarse")

    def test_encoding_is_injective(self):
        x = make_host(1, os_tag="ab", cpu_vendor_tag="c")
        y = make_host(2, os_tag="a", cpu_vendor_tag="bc")
        assert hr_class(x, "coarse") != hr_class(y, "coarse")

    def test_pure(self):
        assert hr_class(self.a, "fine") == hr_class(make_host(9, os_tag="win", cpu_vendor_tag="intel",
                                                             cpu_model_tag="i7"), "fine")


class TestPeakFlops:
    def test_cpu_only(self):
        v = AppVersion(1, "app", 1, {CPU: 1.0})
        assert peak_flops_of(v, make_host(cpu_flops=5e9)) == 5e9

    def test_cpu_plus_gpu(self):
        v = AppVersion(2, "app", 1, {CPU: 0.5, "nvidia": 1.0})
        assert peak_flops_of(v, make_host(cpu_flops=4e9, gpu_flops=1e11)) == pytest.approx(1.02e11, rel=1e-15)

    def test_empty_usage_rejected(self):
        with pytest.raises(ValueError):
            AppVersion(3, "app", 1, {})

    def test_incompatible(self):
        v = AppVersion(2, "app", 1, {CPU: 0.5, "nvidia": 1.0})
        with pytest.raises(IncompatibleVersionError):
            peak_flops_of(v, make_host())

    def test_compatibility_filter(self):
        v = AppVersion(4, "app", 1, {CPU: 0.5, "nvidia": 1.0},
                       Compatibility(os_allow=frozenset({"linux"}), required_kinds=frozenset({"nvidia"}),
                                     min_driver_version=400))
        assert not v.runs_on(make_host(gpu_flops=1e11, driver_version=300))
        assert v.runs_on(make_host(gpu_flops=1e11, driver_version=450))
        assert not v.runs_on(make_host(gpu_flops=1e11, driver_version=450, os_tag="win"))


class TestInvariants:
    def test_job_spec(self):
        with pytest.raises(InvalidSpecError):
            JobSpec("a", 1e12, 1e13, 100, min_quorum=2, init_ninstances=1).validate()
        with pytest.raises(InvalidSpecError):
            JobSpec("a", 1e12, 1e11, 100).validate()
        with pytest.raises(InvalidSpecError):
            JobSpec("a", 1e12, 1e13, 0).validate()

    def test_host_needs_one_cpu(self):
        with pytest.raises(ValueError):
            Host(1, (ProcessingResource("nvidia", 1, 1e11),))

    def test_prefs(self):
        with pytest.raises(ValueError):
            ComputingPrefs(buffer_lo_seconds=10, buffer_hi_seconds=5)
        with pytest.raises(ValueError):
            make_host(ncpu=2, prefs=ComputingPrefs(n_usable_cpus=4))
