import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from torus_sgm.distributions import WrappedGaussianMixture, flow_density, flow_grid
from torus_sgm.errors import ConfigurationError, InvalidInputError, InvalidTerminalError, SolverDivergedError
from torus_sgm.pde import (DriftField, FPProblem, KBEProblem, SpaceTimeField, bernstein_report, duality_check,
                           grad_sup_grid, random_smooth_density, random_smooth_function, random_trig_drift,
                           solve_fokker_planck, solve_hjb_direct, solve_hjb_hopf_cole, solve_kbe)
from torus_sgm.torus import GridDensity, GridSpec, TorusDomain

D1 = TorusDomain(1.0, 1)


def constant_drift(dom, c):
    c = np.asarray(c, dtype=float)
    return DriftField(lambda t, x: np.broadcast_to(c, x.shape).copy(), dom,
                      jacobian=lambda t, x: np.zeros(x.shape + (x.shape[1],)), label="constant")


def mixture(dom=D1):
    return WrappedGaussianMixture(dom, [0.6, 0.4], [[0.3], [0.7]], [0.01, 0.02])


@pytest.mark.parametrize("c", [0.0, 0.7, -1.3])
def test_constant_drift_transports_the_heat_flow(c):
    g = GridSpec(256, D1)
    T = 0.2
    path = solve_fokker_planck(FPProblem(constant_drift(D1, [c]), flow_grid(mixture(), 0.0, g), T, 200))
    exact = flow_density(mixture(), T, g.nodes() - c * T)
    np.testing.assert_allclose(path.values[-1], exact, atol=1e-9)


def test_constant_drift_in_two_dimensions():
    dom = TorusDomain(1.0, 2)
    g = GridSpec(64, dom)
    pi = WrappedGaussianMixture(dom, [1.0], [[0.4, 0.5]], [0.02])
    path = solve_fokker_planck(FPProblem(constant_drift(dom, [0.5, -0.25]), flow_grid(pi, 0.0, g), 0.1, 100))
    exact = flow_density(pi, 0.1, g.nodes() - np.array([0.05, -0.025])).reshape(g.shape)
    np.testing.assert_allclose(path.values[-1], exact, atol=1e-8)


@pytest.mark.parametrize("drift,steps,min_ratio", [
    (DriftField.sinusoidal(D1, 1.0), (20, 40), 14.0),
    # time-dependent drift reaches the fourth-order regime later
    (random_trig_drift(np.random.default_rng(3), D1, amplitude=1.0), (80, 160), 11.0),
])
def test_fokker_planck_fourth_order_in_time(drift, steps, min_ratio):
    g = GridSpec(128, D1)
    m0 = flow_grid(mixture(), 0.0, g)
    ref = solve_fokker_planck(FPProblem(drift, m0, 0.2, 1280)).values[-1]
    errs = [np.max(np.abs(solve_fokker_planck(FPProblem(drift, m0, 0.2, n)).values[-1] - ref)) for n in steps]
    assert errs[0] / errs[1] > min_ratio


@settings(max_examples=10)
@given(seed=st.integers(0, 10_000))
def test_fokker_planck_conserves_mass_and_positivity(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(128, D1)
    p = solve_fokker_planck(FPProblem(random_trig_drift(rng, D1, amplitude=2.0), random_smooth_density(rng, g), 0.3, 300))
    np.testing.assert_allclose(p.values.sum(axis=1) * g.h, 1.0, atol=1e-10)
    assert p.values.min() >= 0
    assert p.meta["clipped_mass"] < 1e-6


@pytest.mark.parametrize("c", [0.0, 0.4])
def test_backward_equation_on_a_cosine(c):
    # phi(0, x) = E psi(x + c T + sqrt(2) W_T) = exp(-4 pi^2 T) cos(2 pi (x + c T))
    g = GridSpec(64, D1)
    T = 0.1
    x = g.axis()
    phi = solve_kbe(KBEProblem(constant_drift(D1, [c]), np.cos(2 * math.pi * x), g, T, 100))
    np.testing.assert_allclose(phi.values[0], math.exp(-4 * math.pi**2 * T) * np.cos(2 * math.pi * (x + c * T)), atol=1e-10)
    np.testing.assert_allclose(phi.values[-1], np.cos(2 * math.pi * x))


@pytest.mark.parametrize("seed", range(3))
def test_duality_identity(seed):
    rng = np.random.default_rng(seed)
    g = GridSpec(256, D1)
    b1, b2 = random_trig_drift(rng, D1), random_trig_drift(rng, D1)
    rep = duality_check(b1, b2, random_smooth_density(rng, g), random_smooth_density(rng, g),
                        random_smooth_function(rng, g), 0.5, 400)
    assert rep.relative_residual < 1e-3
    assert rep.via_duality == pytest.approx(rep.direct, abs=1e-3 * abs(rep.direct) + 1e-12)


def test_duality_identity_two_dimensions():
    dom = TorusDomain(1.0, 2)
    rng = np.random.default_rng(11)
    g = GridSpec(32, dom)
    rep = duality_check(random_trig_drift(rng, dom), random_trig_drift(rng, dom), random_smooth_density(rng, g),
                        random_smooth_density(rng, g), random_smooth_function(rng, g), 0.3, 200)
    assert rep.relative_residual < 1e-3


def test_hopf_cole_and_direct_hjb_agree():
    g = GridSpec(128, D1)
    psi = 1.5 + 0.4 * np.sin(2 * math.pi * g.axis())
    prob = KBEProblem(DriftField.sinusoidal(D1, 1.0), psi, g, 0.5, 500)
    u1 = solve_hjb_hopf_cole(prob).values
    u2 = solve_hjb_direct(prob).values
    np.testing.assert_allclose(u1, u2, atol=1e-8)


def test_hopf_cole_rejects_small_terminal():
    g = GridSpec(32, D1)
    with pytest.raises(InvalidTerminalError):
        solve_hjb_hopf_cole(KBEProblem(DriftField.zero(D1), np.full(32, 0.5), g, 0.1, 10))


def test_unstable_step_raises_with_suggestion():
    g = GridSpec(512, D1)
    b = constant_drift(D1, [200.0])
    with pytest.raises(ConfigurationError) as exc:
        solve_fokker_planck(FPProblem(b, GridDensity.uniform(g), 1.0, 10))
    n = exc.value.suggestion
    assert n > 10
    solve_fokker_planck(FPProblem(b, GridDensity.uniform(g), 0.01, max(1, n // 100)))


@pytest.mark.parametrize("T,steps", [(0.0, 10), (1.0, 0)])
def test_invalid_horizon_or_steps(T, steps):
    g = GridSpec(16, D1)
    with pytest.raises(InvalidInputError):
        solve_fokker_planck(FPProblem(DriftField.zero(D1), GridDensity.uniform(g), T, steps))


def test_non_finite_field_is_a_divergence():
    g = GridSpec(8, D1)
    v = np.ones((2, 8))
    v[1, 3] = np.nan
    with pytest.raises(SolverDivergedError):
        SpaceTimeField(g, 1.0, v)


def test_binary_round_trip(tmp_path):
    g = GridSpec(16, TorusDomain(2.0, 2))
    f = SpaceTimeField(g, 0.5, np.random.default_rng(0).random((3, 16, 16)))
    f.to_binary(tmp_path / "f.bin")
    back = SpaceTimeField.from_binary(tmp_path / "f.bin")
    np.testing.assert_array_equal(back.values, f.values)
    assert back.grid == g and back.horizon == 0.5


def test_binary_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a field at all")
    with pytest.raises(InvalidInputError):
        SpaceTimeField.from_binary(tmp_path / "x.bin")


def test_at_time_requires_stored_slice():
    f = SpaceTimeField(GridSpec(8, D1), 1.0, np.zeros((5, 8)))
    np.testing.assert_array_equal(f.at_time(0.25), np.zeros(8))
    with pytest.raises(InvalidInputError):
        f.at_time(0.3)


def test_csv_export(tmp_path):
    f = SpaceTimeField(GridSpec(8, D1), 1.0, np.arange(24.0).reshape(3, 8), "density")
    f.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "t,x,density" and len(lines) == 25


@pytest.mark.parametrize("a", [0.5, 3.0])
def test_sinusoidal_drift_gradient_sup(a):
    est = DriftField.sinusoidal(D1, a).grad_sup(GridSpec(64, D1), [0.0])
    assert est.value == pytest.approx(a, rel=1e-12)


def test_grad_sup_grid_of_sine():
    g = GridSpec(64, D1)
    assert grad_sup_grid(np.sin(2 * math.pi * g.axis()), g) == pytest.approx(2 * math.pi, rel=1e-12)


def test_bernstein_ratios_bounded_and_grid_stable():
    ratios = []
    for n in (64, 128):
        g = GridSpec(n, D1)
        x = g.axis()
        psi = 1.5 + 0.5 * np.sin(2 * math.pi * x)
        b = DriftField.sinusoidal(D1, 5.0)
        rep = bernstein_report(solve_kbe(KBEProblem(b, psi, g, 1.0, 400)), b)
        ratios.append(rep.bounded_ratio)
        assert 0 < rep.bounded_ratio < 10 and 0 < rep.lipschitz_ratio < 10
    assert abs(ratios[0] / ratios[1] - 1) < 0.01
