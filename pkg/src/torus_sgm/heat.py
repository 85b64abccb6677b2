"""Periodic heat kernel for the generator Laplacian (variance 2t per axis).

The kernel in d dimensions is the product of one-dimensional kernels. Small
times use the wrapped-Gaussian image sum and large times the Fourier series;
the switch happens at ``t* = R^2 / (4 pi)`` unless overridden.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import _kernels
from .errors import InvalidInputError, NoDensityError
from .torus import GridDensity, GridSpec, TorusPoint


@dataclass(frozen=True)
class HeatKernelConfig:
    image_truncation: int = 10
    spectral_cutoff: int = 128
    crossover_time: float | None = None

    def __post_init__(self):
        if self.image_truncation < 1 or self.spectral_cutoff < 1:
            raise InvalidInputError("truncations must be at least 1")

    def crossover(self, radius):
        if self.crossover_time is not None:
            return float(self.crossover_time)
        return radius**2 / (4.0 * math.pi)


DEFAULT_CONFIG = HeatKernelConfig()


def _check_time(t):
    if not (np.isfinite(t) and t > 0):
        raise InvalidInputError(f"heat kernel time must be positive, got {t}")


def kernel_terms(domain, t, x, config=DEFAULT_CONFIG, order=1):
    """Log-kernel, normalised gradient and Hessian at points ``x`` of shape (P, d)."""
    _check_time(t)
    x = np.asarray(x, dtype=float).reshape(-1, domain.dim)
    R = domain.radius
    return _kernels.mixture_eval(
        x, np.zeros((1, domain.dim)), np.array([float(t)]), np.zeros(1), R,
        config.image_truncation, config.spectral_cutoff, config.crossover(R), order,
    )


def _reshape_out(domain, x, vals, vector):
    if isinstance(x, TorusPoint):
        return vals[0]
    arr = np.asarray(x, dtype=float)
    if domain.dim == 1:
        lead = arr.shape
    else:
        lead = arr.shape[:-1]
    if vector:
        return vals.reshape(lead + (domain.dim,))
    return vals.reshape(lead) if lead else float(vals[0])


def heat_kernel(domain, t, x, config=DEFAULT_CONFIG):
    """Kernel value at displacement(s) ``x``; accepts a point or an array of points."""
    logp, _, _ = kernel_terms(domain, t, x, config)
    return _reshape_out(domain, x, np.exp(logp), vector=False)


def log_heat_kernel(domain, t, x, config=DEFAULT_CONFIG):
    logp, _, _ = kernel_terms(domain, t, x, config)
    return _reshape_out(domain, x, logp, vector=False)


def heat_kernel_grad(domain, t, x, config=DEFAULT_CONFIG):
    """Spatial gradient of the kernel, shape ``(..., d)``."""
    logp, s1, _ = kernel_terms(domain, t, x, config)
    return _reshape_out(domain, x, np.exp(logp)[:, None] * s1, vector=True)


def heat_symbol(grid, t):
    """Fourier multiplier exp(-|k|^2 t) of the heat semigroup on ``grid``."""
    ks = grid.wavenumbers()
    k2 = sum(k**2 for k in ks)
    return np.exp(-k2 * t)


def convolve_heat(m, t, grid=None, config=DEFAULT_CONFIG):
    """Heat flow of a grid density or of point masses, tabulated on a grid.

    ``m`` is either a ``GridDensity`` (flowed spectrally) or a tuple
    ``(points, weights)`` of point masses, in which case ``grid`` is required
    and the kernel sum is evaluated exactly at the nodes.
    """
    if not (np.isfinite(t) and t >= 0):
        raise InvalidInputError(f"time must be nonnegative, got {t}")
    if isinstance(m, GridDensity):
        if t == 0:
            return m
        g = m.grid
        v = np.real(np.fft.ifftn(np.fft.fftn(m.values) * heat_symbol(g, t)))
        return GridDensity.from_values(g, v)
    points, weights = m
    if grid is None or not isinstance(grid, GridSpec):
        raise InvalidInputError("point-mass input requires a target GridSpec")
    if t == 0:
        raise NoDensityError("point masses have no grid density at t = 0")
    domain = grid.domain
    points = domain.as_points(points)
    weights = np.asarray(weights, dtype=float).ravel()
    if weights.size != points.shape[0] or np.any(weights < 0) or abs(weights.sum() - 1) > 1e-10:
        raise InvalidInputError("weights must be nonnegative, one per point, and sum to 1")
    R = domain.radius
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    logp, _, _ = _kernels.mixture_eval(
        grid.nodes(), points, np.full(points.shape[0], float(t)), logw, R,
        config.image_truncation, config.spectral_cutoff, config.crossover(R), 1,
    )
    return GridDensity.from_values(grid, np.exp(logp).reshape(grid.shape))
