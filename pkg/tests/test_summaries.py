import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasibart.backfit import SamplerConfig, run_chain
from quasibart.family import QuasiFamily
from quasibart.summaries import (DesignError, Draws, credible_intervals, effective_sample_size,
                                 equal_tail_interval, gelman_rubin, hinge_basis, hpd_interval, hpd_intervals,
                                 inclusion_probabilities, mc_standard_error, projection_summary,
                                 variable_importance)
from quasibart.synth import gen_invgamma_friedman


def make_draws(counts):
    counts = np.asarray(counts)
    S = counts.shape[0]
    return Draws(np.ones(S), np.full(S, np.nan), np.ones(S), counts)


def test_draws_shape_validation():
    with pytest.raises(ValueError):
        Draws(np.ones(3), np.ones(2), np.ones(3), np.zeros((3, 2), dtype=int))
    with pytest.raises(ValueError):
        Draws(np.ones(1), np.ones(1), np.ones(1), -np.ones((1, 2), dtype=int))


def test_inclusion_and_importance_examples():
    d = make_draws([[0, 2, 1], [0, 3, 0], [0, 1, 0], [0, 5, 1]])
    np.testing.assert_array_equal(inclusion_probabilities(d), [0, 1, 0.5])
    np.testing.assert_array_equal(variable_importance(d), [0, 2.75, 0.5])
    with pytest.raises(ValueError):
        inclusion_probabilities(make_draws(np.zeros((0, 3), dtype=int)))


def test_importance_matches_naive_loop():
    rng = np.random.default_rng(0)
    counts = rng.integers(0, 6, size=(40, 7))
    naive = [sum(counts[s, j] for s in range(40)) / 40 for j in range(7)]
    np.testing.assert_allclose(variable_importance(make_draws(counts)), naive, rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), extra=st.integers(1, 10))
def test_inclusion_monotone_under_union_with_splitting_iterations(seed, extra):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 2, size=(20, 4))
    more = rng.integers(0, 3, size=(extra, 4))
    more[:, 2] = rng.integers(1, 4, size=extra)
    before = inclusion_probabilities(make_draws(counts))[2]
    after = inclusion_probabilities(make_draws(np.vstack([counts, more])))[2]
    assert after >= before


def test_projection_examples():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 2))
    r = 1.0 + 2 * x[:, 0] - x[:, 1]
    lin = np.column_stack([np.ones(50), x])
    res = projection_summary(r, lin)
    assert res.r2[0] == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(res.fitted[0], r, atol=1e-10)
    np.testing.assert_allclose(res.coefficients[0], [1, 2, -1], atol=1e-10)
    assert projection_summary(r, np.ones(50)).r2[0] == pytest.approx(0.0, abs=1e-12)
    assert projection_summary(r, r).r2[0] == pytest.approx(1.0, abs=1e-12)


def test_projection_rank_deficient_basis():
    x = np.ones((10, 2))
    with pytest.raises(DesignError):
        projection_summary(np.zeros((1, 10)), x)
    with pytest.raises(DesignError):
        projection_summary(np.zeros((1, 10)), np.ones((9, 1)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_projection_r2_bounds(seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(size=(5, 30))
    basis = rng.normal(size=(30, 3))
    assert np.all(projection_summary(r, basis).r2 <= 1 + 1e-12)
    with_intercept = np.column_stack([np.ones(30), basis])
    assert np.all(projection_summary(r, with_intercept).r2 >= -1e-12)


def test_hinge_basis_is_full_rank_and_fits_piecewise_linear():
    rng = np.random.default_rng(2)
    x = np.column_stack([rng.random(300), rng.integers(0, 2, 300), np.full(300, 3.0)])
    B, names = hinge_basis(x)
    assert np.linalg.matrix_rank(B) == B.shape[1]
    assert names[0] == "(intercept)" and "x2" in names and not any(n.startswith("x3") for n in names)
    knot = np.quantile(x[:, 0], 0.5)
    r = np.abs(x[:, 0] - knot) + x[:, 1]
    assert projection_summary(r, B).r2[0] == pytest.approx(1.0, abs=1e-10)


def test_hpd_equals_equal_tail_for_symmetric_sample():
    d = np.random.default_rng(3).normal(size=100000)
    et, hpd = credible_intervals(d)
    assert (hpd[1] - hpd[0]) / (et[1] - et[0]) == pytest.approx(1.0, abs=0.05)


def test_hpd_for_exponential_sample():
    d = np.random.default_rng(4).exponential(size=100000)
    et, hpd = credible_intervals(d)
    assert hpd[0] < 0.01 and hpd[0] >= d.min()
    assert hpd[1] == pytest.approx(-math.log(0.05), rel=0.03)
    assert hpd[1] - hpd[0] < et[1] - et[0]


def test_interval_limits_and_errors():
    d = np.random.default_rng(5).normal(size=1000)
    assert hpd_interval(d, 0.99999) == (d.min(), d.max())
    with pytest.raises(ValueError):
        credible_intervals(d[:1])
    with pytest.raises(ValueError):
        credible_intervals(d, 1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(2, 200), level=st.floats(0.5, 0.99))
def test_hpd_never_wider_than_equal_tail(seed, n, level):
    rng = np.random.default_rng(seed)
    d = rng.gamma(0.5 + rng.random(), size=n)
    lo, hi = hpd_interval(d, level)
    elo, ehi = equal_tail_interval(d, level)
    assert hi - lo <= ehi - elo + 1e-12
    assert np.mean((d >= lo) & (d <= hi)) >= level - 1e-12


def test_columnwise_hpd_matches_scalar():
    d = np.random.default_rng(6).gamma(2.0, size=(500, 4))
    iv = hpd_intervals(d)
    for j in range(4):
        assert tuple(iv[j]) == hpd_interval(d[:, j])


def test_ess_of_ar1_chain():
    rng = np.random.default_rng(7)
    rho, S = 0.8, 200000
    e = rng.normal(size=S)
    x = np.empty(S)
    x[0] = e[0]
    for t in range(1, S):
        x[t] = rho * x[t - 1] + e[t]
    assert effective_sample_size(x) == pytest.approx(S * (1 - rho) / (1 + rho), rel=0.1)
    iid = rng.normal(size=5000)
    assert effective_sample_size(iid) == pytest.approx(5000, rel=0.1)
    assert mc_standard_error(iid) == pytest.approx(iid.std() / math.sqrt(5000), rel=0.1)


def test_gelman_rubin():
    rng = np.random.default_rng(8)
    same = rng.normal(size=(3, 2000))
    assert gelman_rubin(same) < 1.01
    shifted = same + np.array([[0.0], [3.0], [6.0]])
    assert gelman_rubin(shifted) > 1.5
    with pytest.raises(ValueError):
        gelman_rubin(same[:1])


@pytest.fixture(scope="module")
def friedman_importance():
    # inverse-gamma Friedman data at the least noisy setting, quasi-gamma fit
    orders = []
    incl = []
    for rep in range(5):
        data = gen_invgamma_friedman(250, 10, 0.5, 100 + rep)
        d = run_chain(data.dataset, QuasiFamily("gamma"), SamplerConfig(n_trees=50, iterations=600, burn_in=200),
                      rep)
        orders.append(variable_importance(d))
        incl.append(inclusion_probabilities(d))
    return np.array(orders), np.array(incl)


def test_active_variables_have_higher_inclusion(friedman_importance):
    _, incl = friedman_importance
    assert incl[:, :5].mean() > incl[:, 5:].mean()


def test_importance_ranks_active_above_noise(friedman_importance):
    imp, _ = friedman_importance
    ok = [imp[r, :5].min() > imp[r, 5:].max() for r in range(imp.shape[0])]
    assert np.mean(ok) >= 0.9
