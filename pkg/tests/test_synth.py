import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quasibart.synth import (ScenarioError, ScenarioSpec, friedman_r, gen_dirichlet_multinomial, gen_gamma_power,
                             gen_invgamma_friedman, gen_power_grid, gen_qpois, power_grid_beta)


def test_friedman_examples():
    assert friedman_r([0.0, 0.3, 0.5, 0.0, 0.0, 0.9]) == pytest.approx(0.0, abs=1e-15)
    assert friedman_r([0.5, 1.0, 0.5, 1.0, 1.0]) == pytest.approx(2.5)
    with pytest.raises(ScenarioError):
        friedman_r([0.1, 0.2])


@settings(max_examples=100, deadline=None)
@given(x=st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_friedman_symmetric_in_first_two(x):
    swapped = [x[1], x[0]] + x[2:]
    assert friedman_r(x) == friedman_r(swapped)
    assert friedman_r(x) == friedman_r(x[:5])


def test_qpois_variance_to_mean_at_fixed_x():
    data = gen_qpois(100000, (math.log(3.0),), 2.0, 0)
    y = data.y[:, 0]
    assert data.x.shape == (100000, 0)
    assert y.var() / y.mean() == pytest.approx(2.0, rel=0.05)
    assert np.all(np.mod(y, 2.0) == 0)


def test_qpois_phi_one_is_poisson():
    data = gen_qpois(2000, (1.0, 0.5), 1.0, 1)
    y = data.y[:, 0]
    assert np.all(y == np.round(y))
    assert np.mean((y - data.mu) ** 2 / data.mu) == pytest.approx(1.0, rel=0.1)


@pytest.mark.parametrize("kappa,phi", [(1, 0.5), (1, 2.0), (2, 0.5), (2, 2.0)])
def test_power_grid_mean_variance_relation(kappa, phi):
    data = gen_power_grid(100000, kappa, phi, 2)
    y, mu = data.y[:, 0], data.mu
    assert data.x.shape == (100000, 5)
    assert np.mean(y / mu) == pytest.approx(1.0, abs=0.02)
    # standardized squared residuals average to phi under V = mu^kappa
    assert np.mean((y - mu) ** 2 / mu ** kappa) == pytest.approx(phi, rel=0.05)


def test_power_grid_beta_norms():
    assert np.linalg.norm(power_grid_beta(1)) == pytest.approx(1.2)
    assert np.linalg.norm(power_grid_beta(2)) == pytest.approx(2.0)
    with pytest.raises(ScenarioError):
        gen_power_grid(10, 1.5, 1.0)


def test_invgamma_moments():
    data = gen_invgamma_friedman(1000000, 10, 0.5, 3)
    y, mu = data.y[:, 0], data.mu
    assert np.mean(y / mu) == pytest.approx(1.0, rel=0.02)
    assert np.mean((y - mu) ** 2 / mu ** 2) == pytest.approx(0.5, rel=0.05)
    assert np.all((data.x >= 0) & (data.x <= 1)) and data.x.shape[1] == 10
    np.testing.assert_allclose(data.r, friedman_r(data.x))


def test_invgamma_shape_from_phi():
    # phi = 1 / (alpha - 2): phi = 0.5 gives alpha = 4, so E(1/Y) = alpha / ((alpha - 1) mu)
    data = gen_invgamma_friedman(400000, 5, 0.5, 4)
    assert np.mean(data.mu / data.y[:, 0]) == pytest.approx(4 / 3, rel=0.01)


def test_gamma_power_moments():
    data = gen_gamma_power(1000000, 10, 1.0, 5)
    y, mu = data.y[:, 0], data.mu
    assert np.mean(y / mu) == pytest.approx(1.0, rel=0.01)
    assert np.mean((y - mu) ** 2 / mu ** 1.5) == pytest.approx(1.0, rel=0.03)
    r = data.r
    shape, rate = np.exp(r / 2), np.exp(-r / 2)
    np.testing.assert_allclose(shape / rate, mu)
    np.testing.assert_allclose(shape / rate ** 2, mu ** 1.5)


def test_dirichlet_multinomial_properties():
    data = gen_dirichlet_multinomial(1000000, 0.5, 6)
    assert data.phi == pytest.approx(2 / 3)
    np.testing.assert_allclose(data.y.sum(axis=1), 1.0, atol=1e-12)
    mu1 = data.mu[:, 0]
    assert np.mean((data.y[:, 0] - mu1) ** 2 / (mu1 * (1 - mu1))) == pytest.approx(2 / 3, rel=0.03)
    r = data.r
    np.testing.assert_allclose(r[:, 1], data.x[:, 0] + 4 * data.x[:, 1] * data.x[:, 2])


def test_generators_are_deterministic():
    for gen, args in ((gen_qpois, (50, (1.0, 0.5), 2.0)), (gen_power_grid, (50, 2, 0.5)),
                      (gen_invgamma_friedman, (50, 10, 1.0)), (gen_gamma_power, (50, 10, 1.0)),
                      (gen_dirichlet_multinomial, (50, 0.5))):
        a, b, c = gen(*args, seed=7), gen(*args, seed=7), gen(*args, seed=8)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.x, b.x)
        assert not np.array_equal(a.y, c.y)


def test_empty_datasets():
    assert gen_invgamma_friedman(0, 10, 1.0).dataset.N == 0
    assert gen_dirichlet_multinomial(0, 0.5).y.shape == (0, 3)


def test_scenario_spec_validation():
    assert ScenarioSpec("power_grid", 10, kappa=2, phi=0.5).generate().dataset.N == 10
    assert ScenarioSpec("dirichlet_multinomial", 5, rho=0.5).generate().phi == pytest.approx(2 / 3)
    bad = [dict(scenario="nope", N=5), dict(scenario="qpois_bvm", N=-1), dict(scenario="qpois_bvm", N=5, phi=0),
           dict(scenario="power_grid", N=5, kappa=1.5), dict(scenario="gamma_power", N=5, P=3),
           dict(scenario="qpois_bvm", N=5, kappa=1.0), dict(scenario="dirichlet_multinomial", N=5),
           dict(scenario="gamma_power", N=5, P=10, rho=1.0), dict(scenario="power_grid", N=5, kappa=1,
                                                                  beta=(1.0,))]
    for kw in bad:
        with pytest.raises(ScenarioError):
            ScenarioSpec(**kw)


def test_scenario_spec_round_trip():
    spec = ScenarioSpec("qpois_bvm", 20, phi=2.0, beta=(0.5, 1.0), seed=3)
    d = spec.to_dict()
    assert d["beta"] == [0.5, 1.0]
    again = ScenarioSpec(**{**d, "beta": tuple(d["beta"])}).generate()
    np.testing.assert_array_equal(again.y, spec.generate().y)
