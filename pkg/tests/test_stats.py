import numpy as np
import pytest

from centermix.exceptions import ContractError
from centermix.stats import bootstrap_ci, paired_ttest, student_t_sf2


class TestBootstrap:
    def test_constant_sequence(self):
        s = bootstrap_ci([3.5, 3.5, 3.5], seed=1)
        assert s.mean == 3.5
        assert s.ci_low == 3.5 and s.ci_high == 3.5

    def test_seed_reproducible(self, rng):
        values = rng.normal(size=40)
        a = bootstrap_ci(values, seed=99)
        b = bootstrap_ci(values, seed=99)
        assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)
        c = bootstrap_ci(values, seed=100)
        assert (a.ci_low, a.ci_high) != (c.ci_low, c.ci_high)

    def test_width_close_to_analytic_normal(self):
        rng = np.random.default_rng(5)
        values = rng.normal(0.0, 1.0, size=100)
        s = bootstrap_ci(values, b=1000, seed=7)
        width = s.ci_high - s.ci_low
        analytic = 2 * 1.96 / np.sqrt(100) * values.std(ddof=1)
        assert abs(width - analytic) / analytic < 0.25

    def test_ci_contains_mean(self, rng):
        for _ in range(20):
            values = rng.normal(size=30)
            s = bootstrap_ci(values, seed=int(rng.integers(1 << 30)))
            assert s.ci_low <= s.mean <= s.ci_high

    def test_small_sample_rejected(self):
        with pytest.raises(ContractError):
            bootstrap_ci([1.0])


class TestPairedTTest:
    def test_null_case_p_near_one(self, rng):
        a = rng.normal(size=30)
        jitter = rng.normal(scale=1.0, size=30)
        res = paired_ttest(a + jitter, a)
        assert res.p is not None and res.p > 0.05  # no systematic shift

    def test_tiny_jitter_null(self):
        rng = np.random.default_rng(11)
        base = rng.normal(size=25)
        noise = rng.normal(scale=1e-6, size=25)
        noise -= noise.mean()  # remove any accidental systematic offset
        res = paired_ttest(base + noise, base)
        assert res.p > 0.9

    def test_constant_difference_degenerate(self):
        a = np.arange(10, dtype=float)
        res = paired_ttest(a + 1.0, a)
        assert res.degenerate and res.t is None and res.p is None

    def test_pinned_high_precision_oracle(self):
        # frozen from an arbitrary-precision evaluation of the same
        # definition (mean/sd of differences, regularized incomplete beta)
        a = [0.62, 0.71, 0.58, 0.80, 0.66]
        b = [0.55, 0.68, 0.60, 0.72, 0.61]
        res = paired_ttest(a, b)
        assert res.dof == 4
        assert res.t == pytest.approx(2.3701971215290196, abs=1e-12)
        assert res.p == pytest.approx(0.07680444321010211, abs=1e-10)

    def test_mismatched_lengths(self):
        with pytest.raises(ContractError):
            paired_ttest([1.0, 2.0], [1.0])


class TestStudentCdf:
    # values frozen from an arbitrary-precision reference
    CASES = [
        (0.5, 3, 0.65144796484815099),
        (1.2, 9, 0.26077319739046168),
        (2.5, 4, 0.066766544811988145),
        (4.0, 12, 0.0017616962443950274),
        (0.05, 2, 0.96466673733312133),
        (7.7, 6, 0.0002513794392690776),
    ]

    @pytest.mark.parametrize("t,dof,want", CASES)
    def test_two_sided_tail(self, t, dof, want):
        assert student_t_sf2(t, dof) == pytest.approx(want, abs=1e-8)
        assert student_t_sf2(-t, dof) == pytest.approx(want, abs=1e-8)

    def test_bad_dof(self):
        with pytest.raises(ContractError):
            student_t_sf2(1.0, 0)
