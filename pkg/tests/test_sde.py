import math

import numpy as np
import pytest

from torus_sgm.distributions import Uniform, WrappedGaussianMixture, sample
from torus_sgm.errors import InvalidInputError, SimulationError
from torus_sgm.metrics import w1_circle
from torus_sgm.distributions import Empirical
from torus_sgm.score import ExactScore, FunctionScore
from torus_sgm.sde import (SdeConfig, export_csv, histogram_bins, load_csv, simulate_forward, simulate_reverse,
                           step_normals, stream)
from torus_sgm.torus import TorusDomain

D1 = TorusDomain(1.0, 1)


def test_stream_is_deterministic():
    np.testing.assert_array_equal(stream(7, 3).random(10), stream(7, 3).random(10))


@pytest.mark.parametrize("step", [0, 1, 17])
def test_streams_of_consecutive_steps_do_not_overlap(step):
    # the generator advances its low counter word while drawing; a step index
    # stored there would make step k+1 replay the tail of step k
    a = stream(5, step).random(4096)
    b = stream(5, step + 1).random(64)
    assert not np.isin(b, a).any()


def test_noise_is_uncorrelated_across_steps():
    z = np.stack([step_normals(3, k, 2000, 1)[:, 0] for k in range(20)])
    C = np.corrcoef(z)
    off = C[~np.eye(20, dtype=bool)]
    assert np.max(np.abs(off)) < 0.1


def test_normals_do_not_depend_on_ensemble_size():
    big = step_normals(11, 4, 1000, 2)
    small = step_normals(11, 4, 300, 2)
    np.testing.assert_array_equal(big[:300], small)


def test_normals_are_standard():
    z = step_normals(0, 0, 200_000, 1)[:, 0]
    assert abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


@pytest.mark.parametrize("T,dt,n", [(1.0, 0.3, 10), (0.0, 0.1, 10), (1.0, 0.1, 0), (1.0, -0.1, 5)])
def test_config_validation(T, dt, n):
    with pytest.raises(InvalidInputError):
        SdeConfig(T, dt, n)


def test_forward_from_a_dirac_has_variance_2t():
    pi = WrappedGaussianMixture(D1, [1.0], [[0.5]], [0.0])
    x = simulate_forward(pi, SdeConfig(0.005, 1e-3, 100_000, seed=1))[-1].points[:, 0]
    assert x.mean() == pytest.approx(0.5, abs=1e-3)
    assert x.var() == pytest.approx(0.01, rel=0.02)


def test_record_times():
    cfg = SdeConfig(0.01, 1e-3, 50, seed=2)
    path = simulate_forward(Uniform(D1), cfg, record_times=[0.0, 0.005, 0.01])
    assert [e.time_stamp for e in path] == [0.0, 0.005, 0.01]
    with pytest.raises(InvalidInputError):
        simulate_forward(Uniform(D1), cfg, record_times=[0.0055])


def test_same_seed_same_path_and_different_seed_differs():
    pi = WrappedGaussianMixture(D1, [1.0], [[0.5]], [0.01])
    a = simulate_forward(pi, SdeConfig(0.01, 1e-3, 100, seed=4))[-1].points
    b = simulate_forward(pi, SdeConfig(0.01, 1e-3, 100, seed=4))[-1].points
    c = simulate_forward(pi, SdeConfig(0.01, 1e-3, 100, seed=5))[-1].points
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_particles_evolve_independently_of_ensemble_size():
    pi = Uniform(D1)
    pts = sample(pi, 400, np.random.default_rng(0))
    score = FunctionScore.zero(D1, 0.01)
    big = simulate_reverse(score, SdeConfig(0.01, 1e-3, 400, 9), initial_points=pts)[-1].points
    small = simulate_reverse(score, SdeConfig(0.01, 1e-3, 100, 9), initial_points=pts[:100])[-1].points
    np.testing.assert_array_equal(big[:100], small)


def test_exact_score_reversal_recovers_the_target():
    pi = WrappedGaussianMixture(D1, [0.5, 0.5], [[0.25], [0.75]], [0.004, 0.004])
    T = 0.2
    cfg = SdeConfig(T, 1e-3, 20_000, seed=3)
    gen = simulate_reverse(ExactScore(pi, T), cfg, initial=Uniform(D1))[-1]
    ref = Empirical(D1, sample(pi, 20_000, np.random.default_rng(8)))
    assert w1_circle(Empirical(D1, gen.points), ref).distance < 0.01


def test_reverse_with_zero_score_preserves_uniform():
    cfg = SdeConfig(0.1, 1e-2, 50_000, seed=6)
    x = simulate_reverse(FunctionScore.zero(D1, 0.1), cfg)[-1].points[:, 0]
    counts = np.histogram(x, bins=10, range=(0, 1))[0]
    assert np.max(np.abs(counts - 5000)) < 5 * math.sqrt(5000)


def test_early_stop_shortens_the_run():
    cfg = SdeConfig(0.1, 1e-2, 10, seed=1)
    out = simulate_reverse(FunctionScore.zero(D1, 0.1), cfg, early_stop=0.03)[-1]
    assert out.time_stamp == pytest.approx(0.07)
    with pytest.raises(InvalidInputError):
        simulate_reverse(FunctionScore.zero(D1, 0.1), cfg, early_stop=0.1)


def test_bad_score_raises_simulation_error():
    bad = FunctionScore(lambda t, x: np.full_like(x, np.nan), D1, 0.1)
    with pytest.raises(SimulationError) as exc:
        simulate_reverse(bad, SdeConfig(0.1, 1e-2, 10))
    assert exc.value.step == 0


@pytest.mark.parametrize("n,d,expected", [(1000, 1, 8), (100_000, 1, 64), (100_000, 2, 64), (10, 2, 8)])
def test_histogram_bins(n, d, expected):
    assert histogram_bins(n, d) == expected


def test_csv_round_trip(tmp_path):
    dom = TorusDomain(2.0, 2)
    cfg = SdeConfig(0.01, 1e-3, 30, seed=12)
    ens = simulate_forward(Uniform(dom), cfg)[-1]
    export_csv(ens, tmp_path / "p.csv", cfg)
    back, meta = load_csv(tmp_path / "p.csv", dom)
    np.testing.assert_array_equal(back.points, ens.points)
    assert meta["seed"] == "12"
