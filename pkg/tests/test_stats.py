import math
from fractions import Fraction

import pytest
from scipy import stats

from watermark_lab.core.rng import RngStream
from watermark_lab.schemes.synthetic import SyntheticParams, SyntheticScheme
from watermark_lab.stats.hypothesis import (
    binomial_ci,
    binomial_tail,
    normal_upper_tail,
    one_proportion_z,
    permutation_p_value,
)
from watermark_lab.stats.rates import (
    estimate_false_negative,
    estimate_false_positive,
    rate_estimate,
)


def test_one_proportion_z_rejects_bad_input():
    with pytest.raises(ValueError):
        one_proportion_z(1, 0, 0.5)
    with pytest.raises(ValueError):
        one_proportion_z(5, 4, 0.5)
    with pytest.raises(ValueError):
        one_proportion_z(1, 4, 1.0)


def test_normal_upper_tail():
    assert normal_upper_tail(0.0) == pytest.approx(0.5)
    assert normal_upper_tail(1.6448536) == pytest.approx(0.05, abs=1e-6)


def test_binomial_tail():
    # Pr[Bin(4, 1/2) <= 2]
    assert binomial_tail(4, 1, 0.5) == pytest.approx(11 / 16)
    assert binomial_tail(4, 4, 0.3) == 0.0
    assert binomial_tail(10, 2, 0.0) == pytest.approx(1.0)
    assert binomial_tail(10, 2, 1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        binomial_tail(3, 4, 0.5)
    with pytest.raises(ValueError):
        binomial_tail(3, 1, 1.5)


def test_binomial_tail_large_t_stays_finite():
    assert 0.0 <= binomial_tail(5000, 100, 0.02) <= 1.0


def test_binomial_ci_brackets_point():
    low, high = binomial_ci(30, 100)
    assert low < 0.3 < high
    assert binomial_ci(0, 50)[0] == 0.0
    assert binomial_ci(50, 50)[1] == 1.0
    with pytest.raises(ValueError):
        binomial_ci(0, 0)


def test_rate_estimate():
    estimate = rate_estimate(10, 100, excluded=3)
    assert estimate.point == 0.1
    assert estimate.ci_low <= 0.1 <= estimate.ci_high
    assert estimate.trials == 100
    assert estimate.excluded == 3


def test_permutation_p_value_add_one():
    rng = RngStream(1)
    assert permutation_p_value(-1.0, lambda s: s.uniform(), 99, rng) == pytest.approx(0.01)
    assert permutation_p_value(2.0, lambda s: s.uniform(), 99, rng) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        permutation_p_value(0.0, lambda s: 0.0, 0, rng)


def test_permutation_p_value_is_uniform_under_null():
    rng = RngStream(2, "null")
    values = [
        permutation_p_value(rng.uniform(), lambda s: s.uniform(), 19, rng) for _ in range(400)
    ]
    assert abs(sum(v <= 0.05 for v in values) / 400 - 0.05) < 0.04


def test_synthetic_rates_match_construction(uniform3, prompt):
    scheme = SyntheticScheme(SyntheticParams(target_fp_rate=0.1))
    fp = estimate_false_positive(scheme, uniform3, prompt, 2000, RngStream(17, "fp"))
    assert abs(fp.point - 0.1) < 0.03
    fn = estimate_false_negative(scheme, uniform3, prompt, 100, RngStream(17, "fn"))
    assert fn.point == 0.0
    assert fn.excluded == 0


def test_rates_need_enough_trials(uniform3, prompt):
    scheme = SyntheticScheme(SyntheticParams(target_fp_rate=0.1))
    with pytest.raises(ValueError):
        estimate_false_positive(scheme, uniform3, prompt, 99, RngStream(1))


def test_rate_estimates_are_reproducible(uniform3, prompt):
    scheme = SyntheticScheme(SyntheticParams(target_fp_rate=0.3))
    a = estimate_false_positive(scheme, uniform3, prompt, 100, RngStream(5))
    b = estimate_false_positive(scheme, uniform3, prompt, 100, RngStream(5))
    assert a == b


def exact_tail(t, t_err, p):
    return sum(math.comb(t, k) * p**k * (1 - p) ** (t - k) for k in range(t - t_err))


def test_binomial_tail_matches_exact_sums():
    for p in (Fraction(1, 10), Fraction(1, 3), Fraction(1, 2), Fraction(9, 10)):
        for t in range(21):
            for t_err in range(t + 1):
                expected = float(exact_tail(t, t_err, p))
                assert binomial_tail(t, t_err, float(p)) == pytest.approx(expected, rel=1e-9, abs=1e-15)


def test_binomial_ci_is_clopper_pearson():
    low, high = binomial_ci(50, 100)
    assert low == pytest.approx(stats.beta.ppf(0.025, 50, 51), abs=1e-10)
    assert high == pytest.approx(stats.beta.ppf(0.975, 51, 50), abs=1e-10)
    assert (low, high) == pytest.approx((0.3983, 0.6017), abs=5e-4)


@pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1])
def test_permutation_p_value_is_super_uniform(alpha):
    runs = 2000
    margin = 3 * math.sqrt(alpha * (1 - alpha) / runs)
    continuous = RngStream(3, f"continuous/{alpha}")
    values = [
        permutation_p_value(continuous.uniform(), lambda s: s.uniform(), 99, continuous)
        for _ in range(runs)
    ]
    rate = sum(v <= alpha for v in values) / runs
    assert rate <= alpha + margin
    assert rate >= alpha - margin

    # ties only make the test more conservative
    discrete = RngStream(3, f"discrete/{alpha}")
    values = [
        permutation_p_value(discrete.integer(5), lambda s: s.integer(5), 99, discrete)
        for _ in range(runs)
    ]
    assert sum(v <= alpha for v in values) / runs <= alpha + margin
