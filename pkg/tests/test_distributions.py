import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from torus_sgm.distributions import (Empirical, GridTabulated, HeatFlowLaw, Uniform, WrappedGaussianMixture, entropy,
                                     flow_density, flow_grid, flow_score, flow_score_jacobian, has_density_at,
                                     mollify, sample, sample_stratified)
from torus_sgm.errors import InvalidInputError, NoDensityError
from torus_sgm.heat import heat_kernel
from torus_sgm.torus import GridDensity, GridSpec, TorusDomain

D1 = TorusDomain(1.0, 1)
D2 = TorusDomain(1.0, 2)


def mixture(dom=D1):
    if dom.dim == 1:
        return WrappedGaussianMixture(dom, [0.6, 0.4], [[0.3], [0.7]], [0.01, 0.02])
    return WrappedGaussianMixture(dom, [0.5, 0.5], [[0.2, 0.3], [0.7, 0.6]], [0.01, 0.02])


def test_mixture_density_is_weighted_kernel_sum():
    # a wrapped Gaussian with variance v is the heat kernel at time v / 2
    x = np.linspace(0, 1, 50, endpoint=False)
    s = 0.03
    expected = 0.6 * heat_kernel(D1, 0.005 + s, x - 0.3) + 0.4 * heat_kernel(D1, 0.01 + s, x - 0.7)
    np.testing.assert_allclose(flow_density(mixture(), s, x[:, None]), expected, rtol=1e-12)


@pytest.mark.parametrize("dom", [D1, D2])
@pytest.mark.parametrize("s", [0.0, 0.01, 0.4])
def test_score_matches_finite_difference_of_log_density(dom, s):
    pi = mixture(dom)
    x = np.random.default_rng(0).random((20, dom.dim))
    h = 1e-6
    fd = np.stack([(np.log(flow_density(pi, s, x + h * e)) - np.log(flow_density(pi, s, x - h * e))) / (2 * h)
                   for e in np.eye(dom.dim)], axis=1)
    np.testing.assert_allclose(flow_score(pi, s, x), fd, rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("dom", [D1, D2])
def test_score_jacobian_matches_finite_difference(dom):
    pi = mixture(dom)
    x = np.random.default_rng(1).random((10, dom.dim))
    h = 1e-6
    J = flow_score_jacobian(pi, 0.02, x)
    for j, e in enumerate(np.eye(dom.dim)):
        fd = (flow_score(pi, 0.02, x + h * e) - flow_score(pi, 0.02, x - h * e)) / (2 * h)
        np.testing.assert_allclose(J[:, :, j], fd, rtol=1e-5, atol=1e-4)


@pytest.mark.parametrize("s", [0.0, 0.05, 1.0])
def test_flow_grid_is_normalised(s):
    g = GridSpec(256, D1)
    m = flow_grid(mixture(), s, g)
    assert np.sum(m.values) * g.h == pytest.approx(1.0, abs=1e-12)


def test_uniform_is_invariant_under_the_flow():
    x = np.random.default_rng(2).random((10, 2))
    np.testing.assert_allclose(flow_density(Uniform(D2), 0.3, x), 1.0)
    np.testing.assert_allclose(flow_score(Uniform(D2), 0.3, x), 0.0)


def test_flow_converges_to_uniform():
    g = GridSpec(128, D1)
    m = flow_grid(mixture(), 3.0, g)
    np.testing.assert_allclose(m.values, 1.0, atol=1e-40)


def test_dirac_has_no_density_at_zero():
    pi = WrappedGaussianMixture(D1, [1.0], [[0.5]], [0.0])
    assert not has_density_at(pi, 0.0)
    assert has_density_at(pi, 1e-6)
    with pytest.raises(NoDensityError):
        flow_density(pi, 0.0, np.array([[0.5]]))


def test_empirical_flow_equals_point_kernels():
    emp = Empirical(D1, [[0.1], [0.6]])
    x = np.array([[0.3]])
    expected = 0.5 * (heat_kernel(D1, 0.05, np.array([0.2])) + heat_kernel(D1, 0.05, np.array([-0.3])))
    np.testing.assert_allclose(flow_density(emp, 0.05, x), expected, rtol=1e-12)


def test_grid_tabulated_flow_matches_mixture():
    g = GridSpec(256, D1)
    tab = GridTabulated(flow_grid(mixture(), 0.0, g))
    np.testing.assert_allclose(flow_grid(tab, 0.02, g).values, flow_grid(mixture(), 0.02, g).values, atol=1e-9)


@pytest.mark.parametrize("weights,means,variances", [
    ([0.5, 0.6], [[0.1], [0.2]], [0.01, 0.01]),
    ([0.5, 0.5], [[0.1]], [0.01, 0.01]),
    ([1.0], [[0.1]], [-0.1]),
])
def test_mixture_validation(weights, means, variances):
    with pytest.raises(InvalidInputError):
        WrappedGaussianMixture(D1, weights, means, variances)


@pytest.mark.parametrize("dist", [mixture(), Uniform(D1), Empirical(D1, [[0.2], [0.4]]), mixture(D2)])
def test_samples_lie_in_fundamental_domain(dist):
    x = sample(dist, 500, np.random.default_rng(3))
    assert x.shape == (500, dist.domain.dim)
    assert np.all((x >= 0) & (x < 1))


def test_mixture_sample_moments():
    # wrapped-Gaussian components sit well inside the cell, so circular means are close to the means
    pi = WrappedGaussianMixture(D1, [1.0], [[0.4]], [0.004])
    x = sample(pi, 200_000, np.random.default_rng(4))[:, 0]
    assert x.mean() == pytest.approx(0.4, abs=1e-3)
    assert x.var() == pytest.approx(0.004, rel=2e-2)


def test_stratified_sample_has_one_point_per_stratum():
    pi = mixture()
    x = np.sort(sample_stratified(pi, 50, np.random.default_rng(5))[:, 0])
    g = GridSpec(4096, D1)
    m = flow_grid(pi, 0.0, g)
    cdf = np.cumsum(m.values) * g.h
    F = np.interp(x, g.axis() + g.h / 2, cdf)
    counts = np.histogram(F, bins=np.linspace(0, 1, 51))[0]
    assert counts.max() <= 2


def test_stratified_sampling_requires_circle():
    with pytest.raises(InvalidInputError):
        sample_stratified(mixture(D2), 4, np.random.default_rng(0))


@given(eps=st.floats(1e-3, 0.2))
def test_mollified_floor_is_positive_and_below_mean(eps):
    emp = Empirical(D1, [[0.1], [0.15], [0.7]])
    mol = mollify(emp, eps, grid_n=128)
    assert 0 < mol.delta <= 1.0
    assert mol.delta == pytest.approx(min(mol.density.values.min(), mol.delta), rel=1e-12)


def test_mollified_flow_is_the_shifted_empirical_flow():
    emp = Empirical(D1, [[0.1], [0.5]])
    mol = mollify(emp, 0.01)
    x = np.linspace(0, 1, 9, endpoint=False)[:, None]
    np.testing.assert_allclose(mol.flow().density(0.02, x), HeatFlowLaw(emp).density(0.03, x), rtol=1e-12)


def test_mollify_rejects_zero_time():
    with pytest.raises(InvalidInputError):
        mollify(Empirical(D1, [[0.1]]), 0.0)


def test_entropy_of_uniform_is_minus_log_volume():
    g = GridSpec(32, TorusDomain(2.0, 1))
    assert entropy(GridDensity.uniform(g)) == pytest.approx(-math.log(2.0))


def test_entropy_decreases_along_flow():
    g = GridSpec(256, D1)
    vals = [entropy(flow_grid(mixture(), s, g)) for s in (0.0, 0.01, 0.05, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
