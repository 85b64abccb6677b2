import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from torus_sgm.errors import InvalidInputError, NoDensityError
from torus_sgm.heat import (DEFAULT_CONFIG, HeatKernelConfig, convolve_heat, heat_kernel, heat_kernel_grad,
                            log_heat_kernel)
from torus_sgm.torus import GridDensity, GridSpec, TorusDomain

# p(t, x) = theta_3(pi x / R, exp(-4 pi^2 t / R^2)) / R and its x-derivative,
# evaluated with mpmath at 30 digits.
THETA_ORACLE = [
    (1.0, 0.1, 0.0, 1.0385928831070669, 0.0),
    (1.0, 0.1, 0.3, 0.98807400461547502, -0.23061440987450749),
    (1.0, 0.001, 0.02, 8.0717112935768092, -80.717112935768092),
    (2.0, 0.5, 0.7, 0.49577271620052811, -0.018278888027895604),
    (1.0, 2.0, 0.25, 1.0, 0.0),
    (2.0, 0.01, 1.9, 2.196956447338611, 10.984782236693065),
]


@pytest.mark.parametrize("R,t,x,value,grad", THETA_ORACLE)
def test_kernel_matches_theta_function(R, t, x, value, grad):
    dom = TorusDomain(R, 1)
    np.testing.assert_allclose(heat_kernel(dom, t, np.array([x])), [value], rtol=1e-12)
    np.testing.assert_allclose(np.ravel(heat_kernel_grad(dom, t, np.array([x]))), [grad], rtol=1e-10, atol=1e-14)


def test_two_dimensional_kernel_is_a_product():
    dom2, dom1 = TorusDomain(1.0, 2), TorusDomain(1.0, 1)
    x = np.array([[0.0, 0.3], [0.4, 0.85]])
    expected = heat_kernel(dom1, 0.1, x[:, 0]) * heat_kernel(dom1, 0.1, x[:, 1])
    np.testing.assert_allclose(heat_kernel(dom2, 0.1, x), expected, rtol=1e-13)


@pytest.mark.parametrize("R", [0.5, 1.0, 3.0])
@pytest.mark.parametrize("t", [1e-4, 1e-2, 0.3, 5.0])
def test_kernel_integrates_to_one(R, t):
    dom = TorusDomain(R, 1)
    g = GridSpec(2048, dom)
    mass = np.sum(heat_kernel(dom, t, g.nodes())) * g.h
    assert mass == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("t", [0.02, 0.08, 0.2])
def test_image_sum_and_fourier_series_agree_at_crossover(t):
    dom = TorusDomain(1.0, 1)
    x = np.linspace(0, 1, 37, endpoint=False)
    images = heat_kernel(dom, t, x, HeatKernelConfig(crossover_time=1e9))
    fourier = heat_kernel(dom, t, x, HeatKernelConfig(crossover_time=0.0))
    np.testing.assert_allclose(images, fourier, rtol=1e-12)


def test_log_kernel_consistent():
    dom = TorusDomain(1.0, 1)
    x = np.linspace(0, 1, 11, endpoint=False)
    np.testing.assert_allclose(np.exp(log_heat_kernel(dom, 0.05, x)), heat_kernel(dom, 0.05, x), rtol=1e-13)


def test_log_kernel_finite_at_tiny_time_far_away():
    dom = TorusDomain(1.0, 1)
    v = log_heat_kernel(dom, 1e-6, np.array([0.5]))
    assert np.all(np.isfinite(v)) and v[0] < -1e4


@given(s=st.floats(1e-3, 0.3), u=st.floats(1e-3, 0.3))
def test_semigroup_property(s, u):
    g = GridSpec(256, TorusDomain(1.0, 1))
    m = convolve_heat((np.array([[0.3], [0.8]]), np.array([0.5, 0.5])), 0.01, grid=g)
    np.testing.assert_allclose(convolve_heat(convolve_heat(m, s), u).values, convolve_heat(m, s + u).values, atol=1e-10)


def test_point_mass_convolution_equals_kernel():
    dom = TorusDomain(1.0, 1)
    g = GridSpec(128, dom)
    m = convolve_heat((np.array([[0.25]]), np.array([1.0])), 0.02, grid=g)
    np.testing.assert_allclose(m.values, heat_kernel(dom, 0.02, g.axis() - 0.25), rtol=1e-10)


def test_point_masses_at_time_zero_have_no_density():
    g = GridSpec(64, TorusDomain(1.0, 1))
    with pytest.raises(NoDensityError):
        convolve_heat((np.array([[0.5]]), np.array([1.0])), 0.0, grid=g)


@pytest.mark.parametrize("t", [0.0, -1.0, math.nan])
def test_kernel_rejects_nonpositive_time(t):
    with pytest.raises(InvalidInputError):
        heat_kernel(TorusDomain(1.0, 1), t, np.array([0.1]))


def test_convolve_heat_is_identity_at_zero():
    g = GridSpec(32, TorusDomain(1.0, 1))
    m = GridDensity.uniform(g)
    assert convolve_heat(m, 0.0) is m


def test_config_validation():
    with pytest.raises(InvalidInputError):
        HeatKernelConfig(image_truncation=0)
    assert DEFAULT_CONFIG.crossover(2.0) == pytest.approx(4 / (4 * math.pi))
