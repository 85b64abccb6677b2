import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from torus_sgm import certificates as cert
from torus_sgm.distributions import HeatFlowLaw, Uniform, WrappedGaussianMixture, flow_grid
from torus_sgm.errors import InsufficientDataError, InvalidInputError
from torus_sgm.pde import DriftField, FPProblem, solve_fokker_planck
from torus_sgm.torus import GridSpec, TorusDomain

D1 = TorusDomain(1.0, 1)


def mixture(R=1.0):
    dom = TorusDomain(R, 1)
    return WrappedGaussianMixture(dom, [0.6, 0.4], [[0.3 * R], [0.7 * R]], [0.01 * R * R, 0.02 * R * R])


def shift_field(c):
    return lambda t, x: np.full_like(x, c)


def test_wup_certificate_values():
    inp = cert.WupInputs(eps1=0.2, eps2=0.1, grad_b1_sup=4.0, T=0.25, R=4.0, init_d1=cert.Measured(0.05, 0.01), init_l1=0.3)
    out = cert.wup_certificate(inp, lhs_d1=cert.Measured(0.5), lhs_l1=0.4)
    # sqrt(T g) + 1 = 2, R^{3/2} (1 + sqrt g) = 24, d1 at t=0 with its error bar = 0.06
    assert out["l1-d1"].rhs_terms == pytest.approx({"initial": 2 * 0.06 / 0.5, "drift": 2 * 0.5 * 0.2})
    assert out["l1-l1"].rhs_terms == pytest.approx({"initial": 0.6, "drift": 0.2})
    assert out["d1-torus"].rhs_terms == pytest.approx({"initial": 24 * 0.06, "drift": 24 * 0.1})
    assert out["d1-torus"].fitted_constant == pytest.approx(0.5 / 3.84)


def test_wup_without_measurements_returns_nothing():
    inp = cert.WupInputs(0.1, 0.1, 1.0, 1.0, 1.0, cert.Measured(0.0), 0.0)
    assert cert.wup_certificate(inp) == {}


@pytest.mark.parametrize("field,value", [("eps1", -1.0), ("T", 0.0), ("grad_b1_sup", math.nan)])
def test_wup_inputs_validation(field, value):
    kw = dict(eps1=0.1, eps2=0.1, grad_b1_sup=1.0, T=1.0, R=1.0, init_d1=cert.Measured(0.0), init_l1=0.0)
    kw[field] = value
    with pytest.raises(InvalidInputError):
        cert.WupInputs(**kw)


def test_certificate_flags():
    c = cert.BoundCertificate("x", 0.2, 0.01, {"a": 0.0}, 0.0)
    assert c.inconsistent and c.fitted_constant == math.inf
    ok = cert.BoundCertificate("x", 0.005, 0.01, {"a": 0.0}, 0.0)
    assert not ok.inconsistent and ok.fitted_constant == 0.0
    assert cert.BoundCertificate("x", 1.0, 0.0, {"a": 1.0, "b": 3.0}, 4.0).dominant_term == "b"
    with pytest.raises(InvalidInputError):
        cert.BoundCertificate("x", 1.0, 0.0, {"a": -1.0}, -1.0)


@pytest.mark.parametrize("c", [0.0, 0.3, 2.0])
def test_drift_error_of_constant_difference_over_heat_flow(c):
    flow = HeatFlowLaw(mixture())
    zero = shift_field(0.0)
    assert cert.drift_l2_error(zero, shift_field(c), flow, "sup-in-time", window=(0.0, 0.5)) == pytest.approx(c, rel=1e-10)
    assert cert.drift_l2_error(zero, shift_field(c), flow, "space-time", window=(0.1, 0.5)) == pytest.approx(c * math.sqrt(0.4), rel=1e-10)


def test_drift_error_over_a_density_path():
    g = GridSpec(64, D1)
    path = solve_fokker_planck(FPProblem(DriftField.zero(D1), flow_grid(mixture(), 0.0, g), 0.5, 50))
    zero = shift_field(0.0)
    assert cert.drift_l2_error(zero, shift_field(0.7), path, "sup-in-time") == pytest.approx(0.7, rel=1e-12)
    assert cert.drift_l2_error(zero, shift_field(0.7), path, "space-time") == pytest.approx(0.7 * math.sqrt(0.5), rel=1e-10)


def test_drift_error_needs_window_and_known_mode():
    with pytest.raises(InvalidInputError):
        cert.drift_l2_error(shift_field(0), shift_field(1), HeatFlowLaw(mixture()))
    with pytest.raises(InvalidInputError):
        cert.drift_l2_error(shift_field(0), shift_field(1), HeatFlowLaw(mixture()), mode="L7", window=(0, 1))


def test_esm_certificate_values():
    out = cert.esm_certificate(cert.Measured(0.1), e_nn=0.04, grad_s_sup=9.0, d1_ref=cert.Measured(0.2, 0.05), T=1.0,
                               R=1.0, omega=math.log(2.0), e_nn_sup=0.09, lhs_l1=0.3)
    # R^{3/2} (1 + 3) = 4; reference R e^{-omega T / R^2} d1 = 0.25 / 2
    assert out["d1"].rhs_terms == pytest.approx({"reference": 4 * 0.125, "score": 4 * 0.2})
    # sqrt(T g) + 1 = 4
    assert out["l1"].rhs_terms == pytest.approx({"reference": 4 * 0.5 * 0.25, "score": 4 * 0.3})


def test_transfer_values():
    tr = cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.01, math.exp(-2), 0.04, 0.25, 2.0, 0.1))
    assert tr.factor_terms == pytest.approx({"one": 1.0, "log_delta": 10.0, "inv_sqrt_T": 2.0, "T_c2_sq": 1.0})
    assert tr.total == pytest.approx(0.01 + 1.4)
    assert tr.dominant == "log_delta"
    assert tr.to_dict()["dominant"] == "log_delta"


@given(d1=st.floats(0, 1), c2=st.floats(0, 100), delta=st.floats(1e-8, 0.9), k=st.floats(1.01, 10))
def test_transfer_monotonicity(d1, c2, delta, k):
    base = cert.DsmTransferInputs(0.01, delta, 0.01, 0.25, c2, d1)
    t0 = cert.dsm_to_esm_transfer(base).total
    assert cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.01, delta, 0.01, 0.25, c2, d1 * k)).total >= t0
    assert cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.01, delta, 0.01, 0.25, c2 * k, d1)).total >= t0
    assert cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.01, delta / k, 0.01, 0.25, c2, d1)).total >= t0
    assert t0 >= 0.01


def test_transfer_validation():
    with pytest.raises(InvalidInputError):
        cert.DsmTransferInputs(0.01, 0.0, 0.01, 0.25, 1.0, 0.1)
    with pytest.raises(InvalidInputError):
        cert.DsmTransferInputs(-0.01, 0.5, 0.01, 0.25, 1.0, 0.1)


def test_pointwise_certificate_terms_add_up():
    tr = cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.04, 0.5, 0.01, 0.25, 3.0, 0.02))
    c = cert.dsm_pointwise_certificate(cert.Measured(0.05, 0.001), 0.01, 4.0, 0.2, 0.25, 1.0, 30.0, tr)
    pre = 3.0
    assert c.rhs_terms["early_stopping"] == pytest.approx(0.1)
    assert c.rhs_terms["score"] == pytest.approx(pre * 0.2)
    assert c.rhs_terms["score"] + c.rhs_terms["sample"] == pytest.approx(pre * math.sqrt(tr.total))
    assert c.rhs == pytest.approx(sum(c.rhs_terms.values()))


@pytest.mark.parametrize("R", [1.0, 2.0])
def test_contraction_rate_is_the_slowest_mode(R):
    fit = cert.contraction_fit(HeatFlowLaw(mixture(R)), np.linspace(0.05, 0.3, 6) * R**2)
    assert fit.omega == pytest.approx(4 * math.pi**2, rel=1e-6)
    assert fit.omega_ci[0] <= fit.omega <= fit.omega_ci[1]
    assert fit.to_dict()["omega_over_R2"] == pytest.approx(fit.omega / R**2)


def test_contraction_needs_four_usable_points():
    with pytest.raises(InsufficientDataError):
        cert.contraction_fit(HeatFlowLaw(Uniform(D1)), [0.1, 0.2, 0.3, 0.4, 0.5])


def test_expectation_bound():
    c = cert.BoundCertificate("x", 0.1, 0.02, {"a": 0.5}, 0.5)
    out = cert.expectation_error_bound(3.0, c)
    assert out["measured"] == pytest.approx(0.36)
    assert cert.expectation_error_bound(3.0, c, "certified") == pytest.approx(0.3)
    with pytest.raises(InvalidInputError):
        cert.expectation_error_bound(-1.0, c)


@pytest.mark.parametrize("p", [0.5, 1.0, 2.0])
def test_loglog_slope_of_power_law(p):
    x = np.geomspace(1e-3, 1, 7)
    s, se = cert.loglog_slope(x, 3 * x**p)
    assert s == pytest.approx(p, abs=1e-12) and se < 1e-10
