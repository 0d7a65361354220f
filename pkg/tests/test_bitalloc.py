import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetgc.bitalloc import (
    SOLVERS,
    BitAllocation,
    _Marginals,
    dp_allocate,
    equal_allocate,
    equal_bits,
    exhaustive_oracle,
    greedy_allocate,
    lagrangian_allocate,
    local_search_refine,
    objective,
    proposed_allocate,
    utility,
    utility_table,
)
from hetgc.errors import InstanceTooLarge, InvalidInput
from hetgc.stragglers import profiles_from_p, sample_profiles


def h(p, r, l):
    # direct re-derivation: z = r + 2 bits, s = 2^(z-1) - 1
    s = 2 ** (r + 1) - 1
    return (1 - p) / (p + l / (4 * s * s))


EXAMPLE = profiles_from_p([0.1, 0.5])


@pytest.mark.parametrize("p,r,l,expected", [(0.1, 0, 4, 0.9 / 1.1), (0.1, 2, 4, 7.474576), (0.5, 1, 4, 0.818182)])
def test_utility_values(p, r, l, expected):
    assert utility(p, r, l) == pytest.approx(expected, rel=1e-6)
    assert utility(p, r, l) == pytest.approx(h(p, r, l), rel=1e-14)


def test_utility_table_matches_scalar():
    table = utility_table(np.array([0.1, 0.7]), 37, 30)
    for i, p in enumerate([0.1, 0.7]):
        for r in range(31):
            assert table[i, r] == pytest.approx(h(p, r, 37), rel=1e-13)


def test_utility_table_saturates_without_overflow():
    table = utility_table(np.array([0.25]), 100, 2000)
    assert np.all(np.isfinite(table))
    assert table[0, -1] == pytest.approx(3.0)


def test_dp_example():
    res = dp_allocate(EXAMPLE, 4, 2)
    assert res.r.tolist() == [2, 0]
    assert res.objective == pytest.approx(h(0.1, 2, 4) + h(0.5, 0, 4), rel=1e-12)
    assert res.objective == pytest.approx(7.807910, rel=1e-6)


def test_dp_zero_budget_and_single_worker():
    res = dp_allocate(EXAMPLE, 4, 0)
    assert res.r.tolist() == [0, 0]
    assert res.objective == pytest.approx(h(0.1, 0, 4) + h(0.5, 0, 4))
    assert dp_allocate(profiles_from_p([0.3]), 10, 17).r.tolist() == [17]


def test_exhaustive_examples():
    assert exhaustive_oracle(EXAMPLE, 4, 2).objective == pytest.approx(7.807910, rel=1e-6)
    assert exhaustive_oracle(EXAMPLE, 4, 0).r.tolist() == [0, 0]


def test_exhaustive_refuses_huge_instances():
    with pytest.raises(InstanceTooLarge):
        exhaustive_oracle(profiles_from_p([0.5] * 10), 4, 60)


@settings(max_examples=50, deadline=None)
@given(ps=st.lists(st.floats(0.0, 0.99), min_size=1, max_size=4), Z=st.integers(0, 12),
       l=st.sampled_from([1, 4, 16, 64, 256, 1024]))
def test_dp_equals_exhaustive(ps, Z, l):
    profs = profiles_from_p(ps)
    dp = dp_allocate(profs, l, Z)
    ex = exhaustive_oracle(profs, l, Z)
    assert dp.objective == pytest.approx(ex.objective, rel=1e-12, abs=0)
    assert dp.r.sum() == Z


def test_dp_monotone_in_budget():
    profs = sample_profiles(6, 0.1, 2.0, 1.1, np.random.default_rng(0))
    values = [dp_allocate(profs, 256, Z).objective for Z in range(0, 40)]
    assert all(b >= a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("p", [0.05, 0.3, 0.8, 0.99])
@pytest.mark.parametrize("l", [8, 64, 1024])
def test_marginal_gain_is_sigmoidal(p, l):
    H = utility_table(np.array([p]), l, 21)[0]
    delta = np.diff(H)
    peak = int(np.argmax(delta))
    assert np.all(np.diff(delta[: peak + 1]) >= 0)
    assert np.all(np.diff(delta[peak:]) <= 0)


@given(p=st.floats(0.0, 0.98), eps=st.floats(1e-4, 0.01), r=st.integers(0, 10), l=st.integers(1, 500))
def test_utility_decreases_in_p(p, eps, r, l):
    assert utility(p + eps, r, l) < utility(p, r, l)


@pytest.mark.parametrize("budget,kappa,expected", [(7, 3, [3, 2, 2]), (6, 3, [2, 2, 2]), (0, 4, [0, 0, 0, 0])])
def test_equal_allocate_examples(budget, kappa, expected):
    assert equal_allocate(list(range(kappa)), budget).tolist() == expected


def test_lagrangian_examples():
    r, fell = lagrangian_allocate(profiles_from_p([0.4] * 4), 64, 12)
    assert r.tolist() == [3, 3, 3, 3] and not fell
    r, _ = lagrangian_allocate(profiles_from_p([0.2]), 64, 9)
    assert r.tolist() == [9]
    r, fell = lagrangian_allocate(profiles_from_p([0.2, 0.5]), 64, 0)
    assert r.tolist() == [0, 0] and not fell


def test_lagrangian_always_meets_budget():
    rng = np.random.default_rng(5)
    for _ in range(200):
        k = int(rng.integers(1, 12))
        p = np.sort(rng.uniform(0, 0.99, k))
        budget = int(rng.integers(0, 80))
        r, _ = lagrangian_allocate(p, int(rng.choice([4, 64, 1024])), budget)
        assert r.sum() == budget and np.all(r >= 0)


def test_relaxation_derivative_matches_finite_difference():
    for p, l in [(0.1, 16), (0.7, 1024), (0.95, 64)]:
        m = _Marginals(np.array([p]), l, 1.0, 50)
        for r in (0.3, 1.5, 4.0, 9.0):
            s = 2.0 ** (r + 1) - 1

            def hc(rr):
                ss = 2.0 ** (rr + 1) - 1
                return (1 - p) / (p + l / (4 * ss * ss))

            fd = (hc(r + 1e-6) - hc(r - 1e-6)) / 2e-6
            assert m.deriv(np.array([s]))[0] == pytest.approx(fd, rel=1e-5)


def test_concave_branch_inverse():
    m = _Marginals(np.array([0.3, 0.8]), 256, 1.0, 60)
    s_hi = m.s_peak * 8
    lam = m.deriv(s_hi)
    assert np.allclose(m.s_at(lam.copy()), s_hi, rtol=1e-9)


def test_local_search_examples():
    res = local_search_refine([1, 1], EXAMPLE, 4)
    assert res.r.tolist() == [2, 0]
    dp = dp_allocate(sample_profiles(5, 0.1, 2.0, 1.1, np.random.default_rng(1)), 64, 9)
    profs = sample_profiles(5, 0.1, 2.0, 1.1, np.random.default_rng(1))
    assert local_search_refine(dp.r, profs, 64).r.tolist() == dp.r.tolist()


def test_proposed_examples():
    res = proposed_allocate(EXAMPLE, 4, 2)
    assert res.r.tolist() == [2, 0]
    assert res.objective == pytest.approx(7.807910, rel=1e-6)
    assert proposed_allocate(EXAMPLE, 4, 0).r.tolist() == [0, 0]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), Z=st.integers(0, 60), l=st.sampled_from([16, 256, 4096]))
def test_proposed_dominates_equal_split(seed, Z, l):
    profs = sample_profiles(8, 0.1, 2.0, 1.1, np.random.default_rng(seed))
    res = proposed_allocate(profs, l, Z)
    assert res.r.sum() == Z
    assert res.objective >= objective(equal_bits(profs, Z), profs, l) - 1e-12
    assert res.objective <= dp_allocate(profs, l, Z).objective + 1e-12


def test_greedy_symmetric_instance():
    res = greedy_allocate(profiles_from_p([0.3] * 3), 4, 7)
    assert res.r.tolist() == [3, 2, 2]
    assert greedy_allocate(EXAMPLE, 4, 0).r.tolist() == [0, 0]


def test_greedy_can_be_strictly_suboptimal():
    # two workers, 8 bits, l=256: greedy front-loads one worker, DP splits 4/4
    profs = sample_profiles(2, 0.1, 2.0, 1.1, np.random.default_rng(0))
    g = greedy_allocate(profs, 256, 8)
    d = dp_allocate(profs, 256, 8)
    assert g.r.tolist() == [5, 3] and d.r.tolist() == [4, 4]
    assert g.objective < d.objective * (1 - 1e-3)


def test_all_solvers_meet_budget():
    profs = sample_profiles(10, 0.1, 2.0, 1.1, np.random.default_rng(3))
    for name, solver in SOLVERS.items():
        res = solver(profs, 1024, 25)
        assert res.r.sum() == 25 and res.solver == name
        assert res.objective == pytest.approx(objective(res.r, profs, 1024))


def test_allocation_invariants():
    with pytest.raises(InvalidInput):
        BitAllocation(np.array([1, -1]), 0, 0.0)
    with pytest.raises(InvalidInput):
        BitAllocation(np.array([1, 1]), 3, 0.0)
    a = BitAllocation(np.array([1, 2]), 3, 0.0)
    assert a.z.tolist() == [3, 4] and a.Z_tot == 7
    assert math.isclose(a.objective, 0.0)
