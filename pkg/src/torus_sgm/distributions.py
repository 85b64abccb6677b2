"""Target distributions on the torus and their laws under the heat flow.

Mixtures, empirical measures and Diracs are all handled as kernel mixtures:
a wrapped Gaussian with per-axis variance v is the heat kernel at time v/2,
so flowing it for time s gives the kernel at time v/2 + s. Scores are
posterior-weighted component scores computed with log-space responsibilities.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from . import _kernels
from .errors import DegenerateDensityError, InvalidInputError, NoDensityError
from .heat import DEFAULT_CONFIG, HeatKernelConfig, heat_symbol
from .torus import GridDensity, GridSpec, TorusDomain, _frozen


@dataclass(frozen=True)
class WrappedGaussianMixture:
    """Mixture of wrapped isotropic Gaussians; zero variance means a Dirac."""

    domain: TorusDomain
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        m = self.domain.as_points(self.means)
        v = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if v.size == 1 and w.size > 1:
            v = np.full(w.size, v[0])
        if not (w.size == m.shape[0] == v.size):
            raise InvalidInputError("weights, means and variances must have one entry per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidInputError("mixture weights must be nonnegative and sum to 1")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidInputError("variances must be finite and nonnegative")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "means", _frozen(m))
        object.__setattr__(self, "variances", _frozen(v))


@dataclass(frozen=True)
class Empirical:
    """Equal-weight point cloud, the empirical measure of a sample."""

    domain: TorusDomain
    points: np.ndarray

    def __post_init__(self):
        p = self.domain.as_points(self.points)
        if p.shape[0] == 0:
            raise InvalidInputError("empirical measure needs at least one point")
        object.__setattr__(self, "points", _frozen(p))

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Uniform:
    domain: TorusDomain


@dataclass(frozen=True)
class GridTabulated:
    density: GridDensity

    @property
    def domain(self):
        return self.density.domain


def _components(dist):
    """(log weights, centres, base kernel times) of a kernel-mixture variant."""
    if isinstance(dist, WrappedGaussianMixture):
        with np.errstate(divide="ignore"):
            return np.log(dist.weights), dist.means, dist.variances / 2.0
    if isinstance(dist, Empirical):
        n = len(dist)
        return np.full(n, -math.log(n)), dist.points, np.zeros(n)
    return None


def has_density_at(dist, s):
    comps = _components(dist)
    if comps is None:
        return s >= 0
    return bool(np.all(comps[2] + s > 0))


def _check_s(dist, s):
    if not (np.isfinite(s) and s >= 0):
        raise InvalidInputError(f"flow time must be nonnegative, got {s}")
    if not has_density_at(dist, s):
        raise NoDensityError("measure has atoms at this flow time; no density exists")


def _flowed_grid_values(dist, s):
    d = dist.density
    if s == 0:
        return d.values
    return np.real(np.fft.ifftn(np.fft.fftn(d.values) * heat_symbol(d.grid, s)))


def _trig_eval(values, grid, x, order):
    """Trigonometric interpolation of grid values and their gradient at points."""
    F = np.fft.fftn(values) / values.size
    ks = 2.0 * np.pi * np.fft.fftfreq(grid.n, d=grid.h)
    if grid.domain.dim == 1:
        E = np.exp(1j * np.outer(x[:, 0], ks))
        f = np.real(E @ F)
        g = np.real((E * (1j * ks)) @ F)[:, None] if order >= 1 else None
        return f, g
    E0 = np.exp(1j * np.outer(x[:, 0], ks))
    E1 = np.exp(1j * np.outer(x[:, 1], ks))
    A = E0 @ F
    f = np.real(np.sum(A * E1, axis=1))
    if order < 1:
        return f, None
    B = (E0 * (1j * ks)) @ F
    g = np.column_stack([np.real(np.sum(B * E1, axis=1)), np.real(np.sum(A * E1 * (1j * ks), axis=1))])
    return f, g


def _evaluate(dist, s, x, order, config):
    """Return log density, score and (optionally) normalised Hessian at points."""
    domain = dist.domain
    _check_s(dist, s)
    x = domain.as_points(x)
    P, d = x.shape
    if isinstance(dist, Uniform):
        return np.full(P, -d * math.log(domain.radius)), np.zeros((P, d)), np.zeros((P if order >= 2 else 1, d, d))
    comps = _components(dist)
    if comps is not None:
        logw, means, t0 = comps
        R = domain.radius
        return _kernels.mixture_eval(
            x, means, t0 + s, logw, R, config.image_truncation, config.spectral_cutoff, config.crossover(R), order
        )
    vals = _flowed_grid_values(dist, s)
    f, g = _trig_eval(vals, dist.density.grid, x, 1)
    if np.any(f <= 0):
        raise DegenerateDensityError("tabulated density vanishes at an evaluation point")
    s1 = g / f[:, None]
    s2 = np.zeros((P if order >= 2 else 1, d, d))
    if order >= 2:
        # second derivatives by differentiating the interpolant of the gradient
        grads = [np.real(np.fft.ifftn(1j * k * np.fft.fftn(vals))) for k in dist.density.grid.wavenumbers()]
        for a in range(d):
            _, ga = _trig_eval(grads[a], dist.density.grid, x, 1)
            s2[:, a, :] = ga / f[:, None]
    return np.log(f), s1, s2


def flow_density(dist, s, x, config=DEFAULT_CONFIG):
    """Density of the heat flow of ``dist`` at time ``s``, at points ``x``."""
    logp, _, _ = _evaluate(dist, s, x, 1, config)
    return np.exp(logp)


def flow_log_density(dist, s, x, config=DEFAULT_CONFIG):
    return _evaluate(dist, s, x, 1, config)[0]


def flow_score(dist, s, x, config=DEFAULT_CONFIG):
    """Score grad log eta(s, x), shape ``(P, d)``."""
    logp, s1, _ = _evaluate(dist, s, x, 1, config)
    if not np.all(np.isfinite(logp)):
        raise DegenerateDensityError("density is zero at an evaluation point")
    return s1


def flow_score_jacobian(dist, s, x, config=DEFAULT_CONFIG):
    """Jacobian of the score (Hessian of log density), shape ``(P, d, d)``."""
    _, s1, s2 = _evaluate(dist, s, x, 2, config)
    return s2 - s1[:, :, None] * s1[:, None, :]


def flow_grid(dist, s, grid, config=DEFAULT_CONFIG):
    """Tabulate the flowed density on ``grid`` as a ``GridDensity``."""
    if isinstance(dist, GridTabulated):
        if grid.n != dist.density.grid.n:
            raise InvalidInputError("tabulated flows are only available on their own grid")
        _check_s(dist, s)
        return GridDensity.from_values(grid, _flowed_grid_values(dist, s))
    vals = flow_density(dist, s, grid.nodes(), config).reshape(grid.shape)
    return GridDensity.from_values(grid, vals)


def sample(dist, n, rng):
    """Draw ``n`` points as an ``(n, d)`` array using ``numpy.random.Generator`` ``rng``."""
    domain = dist.domain
    d = domain.dim
    R = domain.radius
    if isinstance(dist, Uniform):
        x = rng.random((n, d)) * R
    elif isinstance(dist, Empirical):
        x = dist.points[rng.integers(0, len(dist), size=n)]
    elif isinstance(dist, WrappedGaussianMixture):
        c = rng.choice(dist.weights.size, size=n, p=dist.weights)
        x = dist.means[c] + np.sqrt(dist.variances[c])[:, None] * rng.standard_normal((n, d))
    else:
        g = dist.density.grid
        p = (dist.density.values * g.cell_volume).ravel()
        cells = rng.choice(p.size, size=n, p=p / p.sum())
        idx = np.column_stack(np.unravel_index(cells, g.shape))
        x = (idx + rng.random((n, d)) - 0.5) * g.h
    return domain.wrap_array(x)


def sample_stratified(dist, n, rng, grid_n=4096):
    """One point per probability stratum of a 1-d law (shared random offset).

    Points are the quantiles F^{-1}((j + u) / n) of the law's grid CDF, which
    removes most of the sampling scatter of d1(pi^N, pi) at a given N.
    """
    domain = dist.domain
    if domain.dim != 1:
        raise InvalidInputError("stratified sampling is implemented for the circle only")
    if isinstance(dist, Empirical):
        return sample(dist, n, rng)
    g = GridSpec(grid_n, domain)
    if isinstance(dist, Uniform):
        dens = GridDensity.uniform(g)
    elif isinstance(dist, GridTabulated):
        dens = dist.density
    else:
        dens = flow_grid(dist, 0.0, g) if has_density_at(dist, 0.0) else None
    if dens is None:
        return sample(dist, n, rng)
    # cells centred at nodes: edges at (k - 1/2) h
    edges = (np.arange(g.n + 1) - 0.5) * g.h
    cdf = np.concatenate([[0.0], np.cumsum(dens.values * g.h)])
    cdf /= cdf[-1]
    q = (np.arange(n) + rng.random()) / n
    return domain.wrap_array(np.interp(q, cdf, edges)[:, None])


@dataclass(frozen=True)
class HeatFlowLaw:
    """The law eta(s, .) of the noising process started from ``base``."""

    base: object
    config: HeatKernelConfig = field(default=DEFAULT_CONFIG)

    @property
    def domain(self):
        return self.base.domain

    def density(self, s, x):
        return flow_density(self.base, s, x, self.config)

    def log_density(self, s, x):
        return flow_log_density(self.base, s, x, self.config)

    def score(self, s, x):
        return flow_score(self.base, s, x, self.config)

    def score_jacobian(self, s, x):
        return flow_score_jacobian(self.base, s, x, self.config)

    def grid_density(self, s, grid):
        return flow_grid(self.base, s, grid, self.config)

    def has_density_at(self, s):
        return has_density_at(self.base, s)

    def is_uniform(self):
        return isinstance(self.base, Uniform)


@dataclass(frozen=True)
class MollifiedEmpirical:
    """Empirical measure smoothed by the heat kernel at time ``epsilon``."""

    sample: Empirical
    epsilon: float
    density: GridDensity
    delta: float
    delta_grid_n: int

    def as_mixture(self):
        n = len(self.sample)
        return WrappedGaussianMixture(self.sample.domain, np.full(n, 1.0 / n), self.sample.points, np.full(n, 2.0 * self.epsilon))

    def flow(self, config=DEFAULT_CONFIG):
        return HeatFlowLaw(self.as_mixture(), config)


def mollify(sample_measure, epsilon, grid_n=256, config=DEFAULT_CONFIG):
    """Smooth an empirical measure and record the density floor delta.

    delta is the minimum over the grid with ``grid_n`` nodes and over one
    refinement (``2 grid_n``); the refined level is recorded.
    """
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise InvalidInputError(f"mollification time must be positive, got {epsilon}")
    grid = GridSpec(grid_n, sample_measure.domain)
    dens = flow_grid(sample_measure, epsilon, grid, config)
    fine = GridSpec(2 * grid_n, sample_measure.domain)
    fine_vals = flow_density(sample_measure, epsilon, fine.nodes(), config)
    delta = float(min(dens.values.min(), fine_vals.min()))
    return MollifiedEmpirical(sample_measure, float(epsilon), dens, delta, fine.n)


def entropy(m):
    """Quadrature of m log m with the convention 0 log 0 = 0."""
    v = m.values
    pos = v > 0
    return float(np.sum(v[pos] * np.log(v[pos])) * m.grid.cell_volume)
