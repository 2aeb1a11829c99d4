import math

import numpy as np
import pytest

from ecp.errors import AllZeroScores, AlphaOutOfRange
from ecp.evalue import EValue, markov_covered, soft_rank_evalue
from ecp.scores import validate_calib_scores


def test_all_equal_scores_force_unit_evalue():
    calib = validate_calib_scores([1, 1, 1])
    assert soft_rank_evalue(calib, 1.0).value == pytest.approx(1.0, abs=1e-15)


def test_hand_arithmetic():
    # 4 / ((6+4)/4) = 1.6
    calib = validate_calib_scores([1, 2, 3])
    assert soft_rank_evalue(calib, 4.0).value == pytest.approx(1.6, abs=1e-15)


def test_zero_test_score():
    calib = validate_calib_scores([2, 2, 2, 2])
    assert soft_rank_evalue(calib, 0.0).value == 0.0


def test_all_zero_rejected():
    calib = validate_calib_scores([0.0, 0.0])
    with pytest.raises(AllZeroScores):
        soft_rank_evalue(calib, 0.0)


def test_loo_average_is_exactly_one():
    # over the n+1 leave-one-out roles the e-values average to 1 identically
    rng = np.random.default_rng(42)
    for _ in range(100):
        m = rng.integers(3, 52)
        multiset = rng.exponential(size=m)
        vals = []
        for i in range(m):
            calib = validate_calib_scores(np.delete(multiset, i))
            vals.append(soft_rank_evalue(calib, float(multiset[i])).value)
        assert abs(math.fsum(vals) / m - 1.0) < 1e-12


def test_evalue_bounded_by_count_plus_one():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        calib = validate_calib_scores(rng.uniform(0, 5, size=n))
        e = soft_rank_evalue(calib, float(rng.uniform(0, 100)))
        assert 0.0 <= e.value <= n + 1


def test_markov_covered_trivial():
    assert markov_covered(EValue(1.0), 0.5) is True  # 1 < 2


def test_markov_boundary_is_strict():
    assert markov_covered(EValue(2.0), 0.5) is False


def test_markov_arithmetic():
    assert markov_covered(EValue(1.6), 0.7) is False  # 1/0.7 ~ 1.4286 < 1.6


def test_markov_alpha_out_of_range():
    for bad in (0.0, 1.0, -0.1, 2.0):
        with pytest.raises(AlphaOutOfRange):
            markov_covered(EValue(1.0), bad)


def test_markov_monotone_in_alpha():
    rng = np.random.default_rng(3)
    for _ in range(100):
        e = EValue(float(rng.uniform(0, 5)))
        alphas = np.sort(rng.uniform(0.01, 0.99, size=10))
        covered = [markov_covered(e, a) for a in alphas]
        # once coverage is lost at some alpha it stays lost for larger alpha
        assert all(not covered[i + 1] or covered[i] for i in range(len(covered) - 1))
