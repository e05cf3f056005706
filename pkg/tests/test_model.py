import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gcfit import model as m

NM = m.SigmoidParams(1.3, 1.0, -1.1, 0.5)
CC = m.SigmoidParams(2.5, 1.5, -0.1, 0.6)
PAPER_VALUES = (-2.43, -1.44, -0.66, -0.13, 0.08, 0.8, 1.35, 2.18)


def test_birth_rate_midpoint():
    assert m.birth_rate(NM, -1.1) == pytest.approx(1.15)


def test_birth_rate_limits():
    assert m.birth_rate(CC, 1e6) == pytest.approx(3.1)
    assert m.birth_rate(NM, -1e6) == pytest.approx(0.5)
    # no overflow warnings at extreme arguments
    with np.errstate(all="raise"):
        m.birth_rate(NM, np.array([-1e308, 1e308]))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(0.01, 10),
    st.floats(0.01, 10),
    st.floats(-3, 3),
    st.floats(0.01, 5),
    st.lists(st.floats(-10, 10), min_size=2, max_size=30),
)
def test_birth_rate_monotone_and_bounded(p1, p2, p3, p4, xs):
    phi = m.SigmoidParams(p1, p2, p3, p4)
    xs = np.sort(np.array(xs))
    y = m.birth_rate(phi, xs)
    assert np.all(np.diff(y) >= -1e-12)
    assert np.all(y >= p4) and np.all(y <= p1 + p4)


def test_sigmoid_requires_positive_components():
    with pytest.raises(m.ModelError):
        m.SigmoidParams(-1, 1, 0, 1)
    with pytest.raises(m.ModelError):
        m.SigmoidParams(1, 1, 0, 0)


def test_type_space_invariants():
    with pytest.raises(m.ModelError):
        m.TypeSpace((1.0,), ())
    with pytest.raises(m.ModelError):
        m.TypeSpace((1.0, 2.0), (3.0,))
    with pytest.raises(m.ModelError):
        m.TypeSpace((2.0, 1.0), (1.5,))


def test_discretize_even_split():
    s = m.discretize([1, 2, 3, 4], 2)
    assert s.boundaries == (2.5,)
    assert s.values == (1.5, 3.5)


def test_discretize_errors():
    with pytest.raises(m.ModelError, match="empty bin"):
        m.discretize([0, 0, 0], 2)
    with pytest.raises(m.ModelError, match="empty bin 1"):
        m.discretize([0, 0.1, 10], 3)
    with pytest.raises(m.ModelError):
        m.discretize([1, 2, 3], 1)


def test_bin_index_rules():
    s = m.discretize([1, 2, 3, 4], 2)
    assert m.bin_index(s, 2.4) == 0
    assert m.bin_index(s, 100) == 1
    assert m.bin_index(s, -100) == 0
    assert m.bin_index(s, 2.5) == 1  # ties go up


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=6, max_size=60), st.integers(2, 4))
def test_discretize_then_bin_recovers_membership(samples, n):
    try:
        space = m.discretize(samples, n)
    except m.ModelError:
        return
    idx = m.bin_index(space, np.array(samples))
    for k in range(n):
        assert np.median(np.array(samples)[idx == k]) == pytest.approx(space.values[k])


def test_bundled_type_space_matches_printed_values():
    space = m.load_type_space()
    assert space.values == PAPER_VALUES
    assert m.bin_index(space, 0.0) == 4
    assert m.TypeSpace.from_json(space.to_json()) == space


def test_bundled_gamma_fixture():
    g = m.load_gamma()
    assert g.shape == (8, 8)
    assert g[1, 0] == pytest.approx(0.20208)
    assert g[4, 3] == pytest.approx(0.13285)
    assert np.all(g[:6, 7] == 0)  # only bins 6 and 7 enter the top bin
    off = g - np.diag(np.diag(g))
    assert np.all(off >= 0)
    p = m.Params(NM, 0.5, 20.0, g, rho=0.1)
    assert np.allclose(p.gamma_star.sum(axis=1), 0, atol=1e-15)
    assert np.allclose(p.gamma, 20 * p.gamma_star)


def test_gamma_roundtrip(tmp_path):
    g = m.load_gamma()
    m.save_gamma(g, tmp_path / "g.json")
    assert np.array_equal(m.load_gamma(tmp_path / "g.json"), g)
    assert "matrix" in json.loads((tmp_path / "g.json").read_text())


def test_params_validation():
    g = m.load_gamma()
    with pytest.raises(m.ModelError):
        m.Params(NM, -1.0, 1.0, g)
    with pytest.raises(m.ModelError):
        m.Params(NM, 1.0, 1.0, g, rho=(0.0,))
    with pytest.raises(m.ModelError):
        m.Params(NM, 1.0, 1.0, g, sigma=0.1)
    bad = g.copy()
    bad[0, 1] = -0.5
    with pytest.raises(m.ModelError):
        m.Params(NM, 1.0, 1.0, bad)


def test_params_with_values_and_key():
    p = m.Params(NM, 0.5, 20.0, m.load_gamma(), rho=0.1)
    q = p.with_values(phi1=2.0, mu=0.7)
    assert q.phi.phi1 == 2.0 and q.mu == 0.7 and q.phi.phi2 == 1.0
    assert p.key() != q.key()
    assert p.key() == m.Params(NM, 0.5, 20.0, m.load_gamma(), rho=0.1).key()
    with pytest.raises(m.ModelError):
        p.with_values(nonsense=1.0)


def test_log_prior_out_of_support():
    spec = m.PriorSpec.default()
    theta = {"phi1": 1, "phi2": 1, "phi3": 0, "phi4": 1, "mu": -1, "delta": 1}
    assert m.log_prior(theta, spec) == -math.inf


def test_log_prior_matches_scipy():
    spec = m.PriorSpec.default()
    theta = {"phi1": 1.3, "phi2": 1.0, "phi3": -1.1, "phi4": 0.5, "mu": 0.5, "delta": 20.0}
    ref = (
        stats.lognorm.logpdf(1.3, 0.75, scale=math.exp(0.5))
        + stats.lognorm.logpdf(1.0, 0.75, scale=math.exp(0.5))
        + stats.norm.logpdf(-1.1, 0, math.sqrt(2))
        + stats.lognorm.logpdf(0.5, 1.2, scale=math.exp(-0.5))
        + stats.lognorm.logpdf(0.5, 0.5, scale=1.0)
        + stats.lognorm.logpdf(20.0, 0.5, scale=1.0)
    )
    assert m.log_prior(theta, spec) == pytest.approx(ref, rel=1e-12)


def test_phi3_prior_variance_parameterisation():
    p = m.PriorSpec.default().priors["phi3"]
    assert p.logpdf(1.0) == pytest.approx(p.logpdf(-1.0))
    assert p.dist.std() == pytest.approx(math.sqrt(2))


def test_mu_prior_sampler_median():
    rng = np.random.default_rng(0)
    draws = m.PriorSpec.default().priors["mu"].sample(rng, 100_000)
    # median of LN(0, 0.5) is 1; binomial SE of the empirical CDF at the median
    frac = np.mean(draws < 1.0)
    assert abs(frac - 0.5) < 3 * math.sqrt(0.25 / draws.size)


@pytest.mark.parametrize("name", ["phi1", "phi2", "phi3", "phi4", "mu", "delta"])
def test_prior_sampler_quantiles(name):
    prior = m.PriorSpec.default().priors[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    n = 100_000
    draws = prior.sample(rng, n)
    for q in (0.1, 0.25, 0.5, 0.75, 0.9):
        frac = np.mean(draws <= prior.dist.ppf(q))
        assert abs(frac - q) < 3 * math.sqrt(q * (1 - q) / n)


def test_prior_medians():
    med = m.PriorSpec.default().medians()
    assert med["mu"] == 1.0 and med["phi3"] == 0.0
    assert med["phi1"] == pytest.approx(math.exp(0.5))
    cr = m.PriorSpec.constant_rate()
    assert cr.names == ("lam", "mu")
    assert cr.medians()["lam"] == pytest.approx(math.exp(1.5))
