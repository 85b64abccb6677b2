import math

import numpy as np
import pytest

from torus_sgm.distributions import Empirical, HeatFlowLaw, WrappedGaussianMixture, flow_score
from torus_sgm.errors import InvalidInputError, TrainingDivergedError
from torus_sgm.heat import heat_kernel, heat_kernel_grad
from torus_sgm.objectives import esm_objective
from torus_sgm.score import (Direction, DsmTrainConfig, ExactScore, FunctionScore, PeriodicNetScore, PerturbedScore,
                             TabulatedScore, dsm_batch, estimate_norms, train_dsm)
from torus_sgm.torus import GridSpec, TorusDomain

D1 = TorusDomain(1.0, 1)
D2 = TorusDomain(1.0, 2)


def mixture():
    return WrappedGaussianMixture(D1, [0.6, 0.4], [[0.3], [0.7]], [0.01, 0.02])


def test_exact_score_is_flow_score():
    x = np.linspace(0, 1, 20, endpoint=False)[:, None]
    np.testing.assert_array_equal(ExactScore(mixture(), 1.0).evaluate(0.1, x), flow_score(mixture(), 0.1, x))


def test_score_rejects_time_outside_horizon():
    with pytest.raises(InvalidInputError):
        ExactScore(mixture(), 1.0).evaluate(1.5, np.array([[0.1]]))


def test_perturbed_score_adds_bounded_direction():
    base = ExactScore(mixture(), 1.0)
    x = np.linspace(0, 1, 32, endpoint=False)[:, None]
    p = PerturbedScore(base, Direction.fourier(D1, 2), 0.3)
    diff = p.evaluate(0.2, x) - base.evaluate(0.2, x)
    np.testing.assert_allclose(diff[:, 0], 0.3 * np.sin(4 * math.pi * x[:, 0]), atol=1e-14)
    assert PerturbedScore(base, Direction.fourier(D1, 2), 0.0).evaluate(0.2, x) == pytest.approx(base.evaluate(0.2, x))


def test_direction_is_normalised():
    g = Direction(lambda t, x: 5 * np.cos(2 * math.pi * x), D1)
    x = np.linspace(0, 1, 256, endpoint=False)[:, None]
    assert np.max(np.abs(g(0.0, x))) == pytest.approx(1.0)


def test_perturbation_magnitude_must_be_nonnegative():
    with pytest.raises(InvalidInputError):
        PerturbedScore(ExactScore(mixture(), 1.0), Direction.fourier(D1), -0.1)


def test_tabulated_score_interpolates_exactly_at_nodes():
    g = GridSpec(64, D1)
    ex = ExactScore(mixture(), 1.0)
    tab = TabulatedScore.from_score(ex, g, [0.1, 0.5, 1.0])
    np.testing.assert_allclose(tab.evaluate(0.5, g.nodes()), ex.evaluate(0.5, g.nodes()))
    mid = tab.evaluate(0.3, g.nodes())
    np.testing.assert_allclose(mid, 0.5 * (ex.evaluate(0.1, g.nodes()) + ex.evaluate(0.5, g.nodes())))


def test_tabulated_score_is_periodic():
    g = GridSpec(16, D2)
    tab = TabulatedScore(g, [0.0, 1.0], np.random.default_rng(0).random((2, 16, 16, 2)))
    x = np.array([[0.99, 0.5], [0.31, 0.999]])
    assert np.all(np.isfinite(tab.evaluate(0.4, x)))


@pytest.mark.parametrize("dom", [D1, D2])
def test_network_jacobian_matches_finite_difference(dom):
    net = PeriodicNetScore(dom, 1.0, fourier_order=3, width=8, seed=1)
    x = np.random.default_rng(2).random((6, dom.dim))
    J = net.jacobian(0.3, x)
    h = 1e-6
    for j, e in enumerate(np.eye(dom.dim)):
        fd = (net.evaluate(0.3, x + h * e) - net.evaluate(0.3, x - h * e)) / (2 * h)
        np.testing.assert_allclose(J[:, :, j], fd, rtol=1e-6, atol=1e-7)


def test_network_loss_gradient_matches_finite_difference():
    net = PeriodicNetScore(D1, 1.0, fourier_order=2, width=4, seed=3)
    rng = np.random.default_rng(4)
    t = rng.random(16) * 0.9 + 0.05
    x = rng.random((16, 1))
    target = rng.normal(size=(16, 1))
    w = rng.random(16)
    _, g = net.loss_and_grad(net.theta, t, x, target, w)
    h = 1e-6
    for i in rng.choice(net.n_params, 12, replace=False):
        e = np.zeros(net.n_params)
        e[i] = h
        fd = (net.loss_and_grad(net.theta + e, t, x, target, w)[0] - net.loss_and_grad(net.theta - e, t, x, target, w)[0]) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_network_is_periodic():
    net = PeriodicNetScore(D2, 1.0, fourier_order=3, width=8, seed=5)
    x = np.array([[0.2, 0.7]])
    np.testing.assert_allclose(net._eval(0.4, x), net._eval(0.4, x + np.array([1.0, -1.0])), atol=1e-12)


def test_network_save_load_round_trip(tmp_path):
    net = PeriodicNetScore(D2, 0.5, fourier_order=2, width=5, t_min=0.01, seed=6)
    net.save(tmp_path / "w.bin")
    back = PeriodicNetScore.load(tmp_path / "w.bin")
    x = np.random.default_rng(0).random((5, 2))
    np.testing.assert_array_equal(back.evaluate(0.2, x), net.evaluate(0.2, x))


def test_network_rejects_bad_parameters():
    with pytest.raises(InvalidInputError):
        PeriodicNetScore(D1, 1.0, fourier_order=2, width=4, params=np.zeros(3))


def test_dsm_batch_targets_are_kernel_scores():
    pts = np.array([[0.2], [0.6]])
    s, x, target, w = dsm_batch(np.random.default_rng(0), pts, 0.01, 1.0, 8, True, D1)
    for i in range(8):
        # kernel score of the displacement, recovered from either centre
        cands = [heat_kernel_grad(D1, s[i], x[i] - p)[0, 0] / heat_kernel(D1, s[i], x[i] - p)[0] for p in pts[:, 0]]
        assert min(abs(target[i, 0] - c) for c in cands) < 1e-8 * max(1, abs(target[i, 0]))
    np.testing.assert_allclose(w, s * math.log(100.0))


def test_training_reduces_loss():
    emp = Empirical(D1, [[0.3], [0.7]])
    net = PeriodicNetScore(D1, 0.5, fourier_order=3, width=16, t_min=0.01, seed=0)
    trained, trace = train_dsm(net, emp, 0.01, 0.5, DsmTrainConfig(steps=400, batch=128, seed=1))
    # the DSM loss has a score-independent floor; its excess is ESM against the empirical flow
    before = esm_objective(net, HeatFlowLaw(emp), (0.01, 0.5)).value
    after = esm_objective(trained, HeatFlowLaw(emp), (0.01, 0.5)).value
    assert after < 0.5 * before
    assert trace.smoothed(40)[-1] < trace.smoothed(40)[0]
    assert np.isfinite(trace.final_se)


def test_training_divergence_is_reported():
    emp = Empirical(D1, [[0.3], [0.7]])
    net = PeriodicNetScore(D1, 0.5, fourier_order=3, width=16, t_min=0.01, seed=0)
    with pytest.raises(TrainingDivergedError) as exc:
        train_dsm(net, emp, 0.01, 0.5, DsmTrainConfig(steps=200, batch=64, lr=1e4, grad_clip=1e12, momentum=0.99))
    assert exc.value.trace is not None and exc.value.trace.size >= 1


def test_training_requires_matching_horizon():
    net = PeriodicNetScore(D1, 0.5)
    with pytest.raises(InvalidInputError):
        train_dsm(net, Empirical(D1, [[0.1]]), 0.01, 1.0, DsmTrainConfig(steps=1))


@pytest.mark.parametrize("k", [1, 2])
def test_norm_estimates_of_a_sine(k):
    w = 2 * math.pi * k
    s = FunctionScore(lambda t, x: np.sin(w * x), D1, 1.0)
    est = estimate_norms(s, 64, [0.5])
    assert est.c0 == pytest.approx(1.0, rel=1e-3)
    assert est.c1 == pytest.approx(w, rel=1e-2)
    assert est.c2 == pytest.approx(w**2, rel=2e-2)
    assert est.c2_norm == pytest.approx(max(1, w, w**2), rel=2e-2)
    assert not est.flagged


def test_exact_score_jacobian_matches_divergence():
    ex = ExactScore(mixture(), 1.0)
    x = np.random.default_rng(0).random((5, 1))
    np.testing.assert_allclose(ex.divergence(0.1, x), ex.jacobian(0.1, x)[:, 0, 0])
