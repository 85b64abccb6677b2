"""Periodic geometry on the flat torus of side R in one or two dimensions.

Points are stored as float arrays with coordinates in [0, R). Grids are
uniform with ``n`` nodes per axis at ``x_j = j h``, ``h = R / n``; grid
functions use ``ij`` indexing so ``values[i, j]`` sits at ``(x_i, x_j)``.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import InvalidInputError


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TorusDomain:
    """The torus of side ``radius`` in ``dim`` dimensions."""

    radius: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise InvalidInputError(f"radius must be positive and finite, got {self.radius}")
        if self.dim not in (1, 2):
            raise InvalidInputError(f"dim must be 1 or 2, got {self.dim}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def volume(self):
        return self.radius**self.dim

    def wrap_array(self, x):
        """Wrap an array of coordinates (any shape) into [0, R)."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("coordinates must be finite")
        y = np.mod(x, self.radius)
        # np.mod can round tiny negatives up to R itself
        return np.where(y >= self.radius, 0.0, y)

    def as_points(self, x):
        """Coerce points to a wrapped ``(P, d)`` array."""
        if isinstance(x, TorusPoint):
            x = x.coords
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and x.ndim <= 1:
            x = x.reshape(-1, 1)
        elif x.ndim == 1:
            x = x.reshape(1, -1)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidInputError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return self.wrap_array(x)


@dataclass(frozen=True)
class TorusPoint:
    coords: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in np.atleast_1d(self.coords))
        object.__setattr__(self, "coords", c)

    @property
    def dim(self):
        return len(self.coords)

    def __array__(self, dtype=None, copy=None):
        return np.array(self.coords, dtype=dtype)


def wrap(domain, raw_coords):
    """Reduce raw coordinates modulo R into a ``TorusPoint``."""
    raw = np.atleast_1d(np.asarray(raw_coords, dtype=float))
    if raw.shape != (domain.dim,):
        raise InvalidInputError(f"expected {domain.dim} coordinates, got {raw.shape}")
    return TorusPoint(tuple(domain.wrap_array(raw)))


def _check_point(domain, p):
    c = np.asarray(p.coords if isinstance(p, TorusPoint) else p, dtype=float)
    c = np.atleast_1d(c)
    if c.shape[-1] != domain.dim:
        raise InvalidInputError(f"point dimension {c.shape[-1]} does not match domain dimension {domain.dim}")
    if not np.all(np.isfinite(c)) or np.any(c < 0) or np.any(c >= domain.radius):
        raise InvalidInputError("point lies outside [0, R)^d; wrap it first")
    return c


def periodic_difference(domain, x, y):
    """Minimal-image difference ``x - y`` componentwise, in [-R/2, R/2)."""
    R = domain.radius
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return diff - R * np.floor(diff / R + 0.5)


def torus_distance(domain, x, y):
    """Geodesic (flat) distance between two points of the torus."""
    a = _check_point(domain, x)
    b = _check_point(domain, y)
    return float(np.sqrt(np.sum(periodic_difference(domain, a, b) ** 2, axis=-1)))


def pairwise_distance(domain, x, y):
    """Matrix of torus distances between two ``(P, d)`` point sets."""
    x = domain.as_points(x)
    y = domain.as_points(y)
    diff = periodic_difference(domain, x[:, None, :], y[None, :, :])
    return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid with ``n`` nodes per axis."""

    n: int
    domain: TorusDomain = field(default_factory=TorusDomain)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 8 or self.n % 2:
            raise InvalidInputError(f"nodes per axis must be an even integer >= 8, got {self.n}")
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self):
        return self.domain.radius / self.n

    @property
    def shape(self):
        return (self.n,) * self.domain.dim

    @property
    def cell_volume(self):
        return self.h**self.domain.dim

    def axis(self):
        return np.arange(self.n) * self.h

    def nodes(self):
        """All nodes as a ``(n^d, d)`` array in ``ij`` order."""
        ax = self.axis()
        if self.domain.dim == 1:
            return ax[:, None]
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def wavenumbers(self):
        """Angular wavenumbers per axis, broadcastable against ``fftn`` output."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)
        if self.domain.dim == 1:
            return [k]
        return [k[:, None], k[None, :]]

    def refined(self, factor=2):
        return GridSpec(self.n * factor, self.domain)


def spectral_gradient(values, grid):
    """Gradient of a periodic grid function by FFT; returns shape ``(d, *grid.shape)``.

    The Nyquist mode is dropped, which keeps the derivative real and odd.
    """
    f = np.fft.fftn(values)
    out = []
    for k in grid.wavenumbers():
        k = k.copy()
        k[np.abs(np.abs(k) - np.pi / grid.h) < 1e-9 * np.pi / grid.h] = 0.0
        out.append(np.real(np.fft.ifftn(1j * k * f)))
    return np.array(out)


def grid_integrate(f, grid=None):
    """Periodic rectangle-rule quadrature ``sum f h^d``.

    ``f`` may be a ``GridDensity`` or an array of grid values, in which case
    ``grid`` must be supplied.
    """
    if isinstance(f, GridDensity):
        grid = f.grid
        f = f.values
    if grid is None:
        raise InvalidInputError("grid_integrate needs a GridSpec for raw arrays")
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise InvalidInputError("grid values must be finite")
    return float(f.sum() * grid.cell_volume)


@dataclass(frozen=True)
class GridDensity:
    """Probability density tabulated on a periodic grid."""

    grid: GridSpec
    values: np.ndarray
    tol: float = 1e-8

    def __post_init__(self):
        v = _frozen(self.values)
        if v.shape != self.grid.shape:
            raise InvalidInputError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvalidInputError("density values must be finite and nonnegative")
        mass = float(v.sum() * self.grid.cell_volume)
        if abs(mass - 1.0) > self.tol:
            raise InvalidInputError(f"density integrates to {mass!r}, not 1 (tol {self.tol})")
        object.__setattr__(self, "values", v)

    @property
    def domain(self):
        return self.grid.domain

    @classmethod
    def from_values(cls, grid, values, tol=1e-8):
        """Clip negatives and renormalise before validation."""
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        mass = v.sum() * grid.cell_volume
        if not mass > 0:
            raise InvalidInputError("cannot normalise a function with zero mass")
        return cls(grid, v / mass, tol)

    @classmethod
    def uniform(cls, grid):
        return cls(grid, np.full(grid.shape, 1.0 / grid.domain.volume))


@dataclass(frozen=True)
class ParticleEnsemble:
    """Wrapped particle positions at a common time."""

    domain: TorusDomain
    points: np.ndarray
    time_stamp: float = 0.0

    def __post_init__(self):
        p = self.domain.as_points(self.points)
        if p.shape[0] == 0:
            raise InvalidInputError("ensemble must be nonempty")
        object.__setattr__(self, "points", _frozen(p))

    def __len__(self):
        return self.points.shape[0]

    def histogram(self, grid):
        """Cell-centred histogram density on ``grid`` (cells centred at nodes)."""
        h = grid.h
        idx = np.floor(self.points / h + 0.5).astype(int) % grid.n
        counts = np.zeros(grid.shape)
        np.add.at(counts, tuple(idx.T), 1.0)
        return GridDensity(grid, counts / (len(self) * grid.cell_volume), tol=1e-9)
