"""Periodic spectral solvers for Fokker-Planck, backward Kolmogorov and HJB.

Sign conventions (drift b is the SDE drift, diffusion coefficient alpha):

    Fokker-Planck   d_t m = alpha Lap m - div(m b)
    backward        -d_t phi - alpha Lap phi - b . grad phi = 0,   phi(T) = psi
    HJB             -d_t u - alpha Lap u + (alpha/2)|grad u|^2 - b . grad u = 0

with u = -2 log phi. For these, d/dt int phi m = int m grad phi . (b_m - b_phi),
which is the duality identity checked by ``duality_check``.

Time stepping is ETDRK4 (exponential time differencing, fourth order) with the
heat semigroup applied exactly in Fourier space and the transport part
treated explicitly with spectral derivatives.
"""

from dataclasses import dataclass, field
import csv
import logging
import math
import struct

import numpy as np
from scipy.integrate import simpson

from .errors import ConfigurationError, InvalidInputError, InvalidTerminalError, SolverDivergedError
from .torus import GridDensity, GridSpec, TorusDomain

log = logging.getLogger(__name__)

CLIP_FLAG_MASS = 1e-6


@dataclass(frozen=True)
class SupEstimate:
    """Sup-norm estimate on a grid and on one refinement."""

    value: float
    coarse: float
    uncertainty: float
    grid_n: int


class DriftField:
    """Time-dependent vector field b(t, x) evaluated on ``(P, d)`` point arrays."""

    def __init__(self, fn, domain, jacobian=None, label="drift"):
        self._fn = fn
        self.domain = domain
        self.jacobian = jacobian
        self.label = label
        self._cache = {}

    def __call__(self, t, x):
        out = np.asarray(self._fn(t, x), dtype=float)
        return out.reshape(x.shape[0], self.domain.dim)

    @classmethod
    def zero(cls, domain):
        return cls(lambda t, x: np.zeros_like(x), domain, jacobian=lambda t, x: np.zeros(x.shape + (x.shape[1],)), label="zero")

    @classmethod
    def sinusoidal(cls, domain, amplitude, mode=1, phase=0.0):
        """b_i = a R / (2 pi k) sin(2 pi k x_i / R + phase), so sup |grad b| = a."""
        R = domain.radius
        w = 2.0 * math.pi * mode / R

        def fn(t, x):
            return amplitude / w * np.sin(w * x + phase)

        def jac(t, x):
            J = np.zeros(x.shape + (x.shape[1],))
            for a in range(x.shape[1]):
                J[:, a, a] = amplitude * np.cos(w * x[:, a] + phase)
            return J

        return cls(fn, domain, jacobian=jac, label=f"sin(a={amplitude})")

    @classmethod
    def from_score(cls, score, horizon, scale=2.0):
        """Reverse-time drift b(t, x) = scale * s(T - t, x)."""

        def fn(t, x):
            return scale * score.evaluate(horizon - t, x)

        jac = None
        if hasattr(score, "jacobian"):
            def jac(t, x):
                return scale * score.jacobian(horizon - t, x)

        return cls(fn, score.domain, jacobian=jac, label=f"reverse({getattr(score, 'provenance', 'score')})")

    def grad_sup(self, grid, times):
        """Estimate sup |grad b| (entrywise) on ``grid`` and its refinement."""
        key = (grid.n, tuple(np.round(np.asarray(times, dtype=float), 15)))
        if key in self._cache:
            return self._cache[key]
        vals = [self._grad_sup_level(g, times) for g in (grid, grid.refined())]
        unc = abs(vals[1] - vals[0]) / max(vals[1], 1e-300) if vals[1] > 0 else 0.0
        est = SupEstimate(vals[1], vals[0], unc, grid.refined().n)
        self._cache[key] = est
        return est

    def _grad_sup_level(self, grid, times):
        x = grid.nodes()
        best = 0.0
        for t in times:
            if self.jacobian is not None:
                J = self.jacobian(t, x)
            else:
                h = grid.h
                J = np.empty(x.shape + (x.shape[1],))
                for j in range(x.shape[1]):
                    e = np.zeros(x.shape[1])
                    e[j] = h
                    J[:, :, j] = (self(t, x + e) - self(t, x - e)) / (2 * h)
            best = max(best, float(np.max(np.abs(J))))
        return best

    def sup(self, grid, times):
        x = grid.nodes()
        return max(float(np.max(np.abs(self(t, x)))) for t in times)


@dataclass
class FPProblem:
    drift: DriftField
    initial: GridDensity
    horizon: float
    time_steps: int
    diffusion: float = 1.0

    @property
    def grid(self):
        return self.initial.grid

    @property
    def domain(self):
        return self.initial.grid.domain


@dataclass
class KBEProblem:
    drift: DriftField
    terminal: np.ndarray
    grid: GridSpec
    horizon: float
    time_steps: int
    diffusion_floor: float | None = None

    @property
    def diffusion(self):
        return 1.0 if self.diffusion_floor is None else 1.0 / self.diffusion_floor

    @property
    def domain(self):
        return self.grid.domain


@dataclass(frozen=True)
class SpaceTimeField:
    """Grid function on ``time_steps + 1`` equispaced times in [0, T]."""

    grid: GridSpec
    horizon: float
    values: np.ndarray
    kind: str = "field"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape[1:] != self.grid.shape:
            raise InvalidInputError("slice shape does not match grid")
        if not np.all(np.isfinite(v)):
            raise SolverDivergedError("space-time field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def time_steps(self):
        return self.values.shape[0] - 1

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.time_steps + 1)

    def slice(self, i):
        return self.values[i]

    def at_time(self, t):
        i = int(round(t / self.horizon * self.time_steps))
        if not 0 <= i <= self.time_steps or abs(i * self.horizon / self.time_steps - t) > 1e-9 * max(1.0, self.horizon):
            raise InvalidInputError(f"time {t} is not a stored slice")
        return self.values[i]

    def density(self, i):
        return GridDensity.from_values(self.grid, self.values[i])

    _MAGIC = b"TSGMFLD1"

    def to_binary(self, path):
        """Header: magic, int64 dim, int64 n, int64 steps, float64 T, float64 R; then doubles."""
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<qqqdd", self.grid.domain.dim, self.grid.n, self.time_steps, self.horizon, self.grid.domain.radius))
            f.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_binary(cls, path, kind="field"):
        with open(path, "rb") as f:
            if f.read(8) != cls._MAGIC:
                raise InvalidInputError("not a space-time field file")
            dim, n, steps, T, R = struct.unpack("<qqqdd", f.read(40))
            data = np.frombuffer(f.read(), dtype="<f8")
        grid = GridSpec(n, TorusDomain(R, dim))
        return cls(grid, T, data.reshape((steps + 1,) + grid.shape), kind)

    def to_csv(self, path, every=1):
        """Write selected slices as rows ``t, x[, y], value``."""
        nodes = self.grid.nodes()
        names = ["t", "x"] if nodes.shape[1] == 1 else ["t", "x", "y"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(names + [self.kind])
            for i in range(0, self.time_steps + 1, every):
                t = self.times[i]
                for p, v in zip(nodes, self.values[i].ravel()):
                    w.writerow([repr(t)] + [repr(c) for c in p] + [repr(float(v))])


class _Spectral:
    def __init__(self, grid, alpha):
        self.grid = grid
        ks = grid.wavenumbers()
        nyq = math.pi / grid.h
        self.ik = []
        for k in ks:
            k = np.broadcast_to(k, grid.shape).copy()
            k[np.isclose(np.abs(k), nyq)] = 0.0
            self.ik.append(1j * k)
        self.k2 = np.broadcast_to(sum(k**2 for k in ks), grid.shape).copy()
        self.L = -alpha * self.k2

    def grad(self, vhat):
        return [np.real(np.fft.ifftn(ik * vhat)) for ik in self.ik]


def _etd_coefficients(L, dt, contour=32):
    r = np.exp(1j * np.pi * (np.arange(1, contour + 1) - 0.5) / contour)
    LR = dt * L[..., None] + r
    E = np.exp(dt * L)
    E2 = np.exp(dt * L / 2)
    Q = dt * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=-1))
    f1 = dt * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR**2)) / LR**3, axis=-1))
    f2 = dt * np.real(np.mean((2 + LR + np.exp(LR) * (-2 + LR)) / LR**3, axis=-1))
    f3 = dt * np.real(np.mean((-4 - 3 * LR - LR**2 + np.exp(LR) * (4 - LR)) / LR**3, axis=-1))
    return E, E2, Q, f1, f2, f3


def _amplification(coef, mu):
    """Exact ETDRK4 growth factor for v' = L v + mu v, per mode."""
    E, E2, Q, f1, f2, f3 = coef
    a = E2 + Q * mu
    b = E2 + Q * mu * a
    c = E2 * a + Q * mu * (2 * b - 1)
    return np.abs(E + f1 * mu + 2 * f2 * mu * (a + b) + f3 * mu * c)


def _check_stability(spec, horizon, steps, speed):
    """Frozen-coefficient von Neumann test; raises with a suggested step count."""

    def stable(nsteps):
        dt = horizon / nsteps
        coef = _etd_coefficients(spec.L, dt)
        kmag = np.sqrt(spec.k2)
        for frac in np.linspace(0.25, 1.0, 4):
            if np.max(_amplification(coef, 1j * kmag * speed * frac)) > 1.0 + 1e-10:
                return False
        return True

    if speed == 0 or stable(steps):
        return
    n = steps
    while not stable(n) and n < steps * 2**12:
        n *= 2
    raise ConfigurationError(
        f"time step {horizon / steps:.3g} is unstable for drift speed {speed:.3g} at h={spec.grid.h:.3g}; "
        f"use at least {n} steps",
        suggestion=n,
    )


def _etdrk4(v0, spec, nonlinear, t0, direction, dt, steps, post=None):
    """Integrate v' = L v + N(v, t) and return all slices (physical space)."""
    coef = _etd_coefficients(spec.L, dt)
    E, E2, Q, f1, f2, f3 = coef
    out = np.empty((steps + 1,) + v0.shape)
    v = v0.copy()
    out[0] = v
    fft, ifft = np.fft.fftn, lambda z: np.real(np.fft.ifftn(z))
    for i in range(steps):
        t = t0 + direction * i * dt
        th = t + direction * dt / 2
        vh = fft(v)
        Nv = nonlinear(v, vh, t)
        ah = E2 * vh + Q * Nv
        Na = nonlinear(ifft(ah), ah, th)
        bh = E2 * vh + Q * Na
        Nb = nonlinear(ifft(bh), bh, th)
        ch = E2 * ah + Q * (2 * Nb - Nv)
        Nc = nonlinear(ifft(ch), ch, t + direction * dt)
        vh = E * vh + Nv * f1 + 2 * (Na + Nb) * f2 + Nc * f3
        v = ifft(vh)
        if not np.all(np.isfinite(v)):
            raise SolverDivergedError(f"non-finite values after step {i + 1}")
        if post is not None:
            v = post(v)
        out[i + 1] = v
    return out


class _DriftCache:
    def __init__(self, drift, grid):
        self.drift = drift
        self.nodes = grid.nodes()
        self.shape = grid.shape
        self._last = {}

    def __call__(self, t):
        key = round(t, 14)
        if key not in self._last:
            if len(self._last) > 4:
                self._last.clear()
            b = self.drift(t, self.nodes)
            self._last[key] = [b[:, a].reshape(self.shape) for a in range(b.shape[1])]
        return self._last[key]


def _sample_times(T, steps, count=17):
    return np.linspace(0.0, T, min(count, steps + 1))


def solve_fokker_planck(p, check_stability=True):
    """Density path of the Fokker-Planck equation; clipping is logged in ``meta``."""
    if not p.horizon > 0 or p.time_steps < 1:
        raise InvalidInputError("horizon must be positive and time_steps >= 1")
    grid = p.grid
    spec = _Spectral(grid, p.diffusion)
    dt = p.horizon / p.time_steps
    if check_stability:
        _check_stability(spec, p.horizon, p.time_steps, p.drift.sup(grid, _sample_times(p.horizon, p.time_steps)))
    bcache = _DriftCache(p.drift, grid)

    def nonlinear(m, mh, t):
        b = bcache(t)
        return -sum(ik * np.fft.fftn(m * ba) for ik, ba in zip(spec.ik, b))

    clipped = [0.0]
    cv = grid.cell_volume

    def post(m):
        neg = m < 0
        if neg.any():
            lost = -float(m[neg].sum()) * cv
            clipped[0] += lost
            mass = float(m.sum()) * cv
            m = np.where(neg, 0.0, m)
            m *= mass / (float(m.sum()) * cv)
        return m

    vals = _etdrk4(np.array(p.initial.values), spec, nonlinear, 0.0, 1, dt, p.time_steps, post)
    valid = clipped[0] <= CLIP_FLAG_MASS
    if clipped[0] > 0:
        log.info("Fokker-Planck solve clipped %.3e of mass", clipped[0])
    return SpaceTimeField(grid, p.horizon, vals, "density", {"clipped_mass": clipped[0], "valid": valid})


def _solve_backward(p, nonlinear_factory, terminal, speed_extra=0.0, check_stability=True):
    if not p.horizon > 0 or p.time_steps < 1:
        raise InvalidInputError("horizon must be positive and time_steps >= 1")
    grid = p.grid
    psi = np.asarray(terminal, dtype=float).reshape(grid.shape)
    if not np.all(np.isfinite(psi)):
        raise InvalidInputError("terminal data must be finite")
    spec = _Spectral(grid, p.diffusion)
    dt = p.horizon / p.time_steps
    if check_stability:
        speed = p.drift.sup(grid, _sample_times(p.horizon, p.time_steps)) + speed_extra
        _check_stability(spec, p.horizon, p.time_steps, speed)
    bcache = _DriftCache(p.drift, grid)
    # integrate in reversed time tau = T - t
    vals = _etdrk4(psi, spec, nonlinear_factory(spec, bcache), p.horizon, -1, dt, p.time_steps)
    return vals[::-1].copy(), psi


def solve_kbe(p, check_stability=True):
    """Backward Kolmogorov solution phi on [0, T] with phi(T) = psi."""

    def factory(spec, bcache):
        def nonlinear(v, vh, t):
            g = spec.grad(vh)
            return np.fft.fftn(sum(ba * ga for ba, ga in zip(bcache(t), g)))
        return nonlinear

    vals, psi = _solve_backward(p, factory, p.terminal, check_stability=check_stability)
    return SpaceTimeField(p.grid, p.horizon, vals, "phi", {"diffusion": p.diffusion})


def _check_hjb_terminal(psi):
    psi = np.asarray(psi, dtype=float)
    if np.any(psi < 1.0 - 1e-14):
        raise InvalidTerminalError(f"terminal data must be >= 1 for the Hopf-Cole path (min {psi.min():.6g})")


def solve_hjb_hopf_cole(p, check_stability=True):
    """u = -2 log phi from the linear backward solve (authoritative path)."""
    _check_hjb_terminal(p.terminal)
    phi = solve_kbe(p, check_stability)
    u = -2.0 * np.log(phi.values)
    return SpaceTimeField(p.grid, p.horizon, u, "u", {"diffusion": p.diffusion, "route": "hopf-cole"})


def solve_hjb_direct(p, check_stability=True):
    """Direct nonlinear solve of the HJB equation (diagnostic cross-check)."""
    _check_hjb_terminal(p.terminal)
    alpha = p.diffusion
    u_T = -2.0 * np.log(np.asarray(p.terminal, dtype=float).reshape(p.grid.shape))
    spec0 = _Spectral(p.grid, alpha)
    grad_T = max(float(np.max(np.abs(g))) for g in spec0.grad(np.fft.fftn(u_T)))

    def factory(spec, bcache):
        def nonlinear(v, vh, t):
            g = spec.grad(vh)
            out = sum(ba * ga for ba, ga in zip(bcache(t), g)) - 0.5 * alpha * sum(ga**2 for ga in g)
            return np.fft.fftn(out)
        return nonlinear

    vals, _ = _solve_backward(p, factory, u_T, speed_extra=alpha * grad_T, check_stability=check_stability)
    return SpaceTimeField(p.grid, p.horizon, vals, "u", {"diffusion": alpha, "route": "direct"})


def grad_sup_grid(values, grid):
    """sup |grad f| (Euclidean) of a grid function via spectral differentiation."""
    spec = _Spectral(grid, 1.0)
    g = spec.grad(np.fft.fftn(values))
    return float(np.sqrt(np.max(sum(gi**2 for gi in g))))


@dataclass(frozen=True)
class BernsteinReport:
    bounded_ratio: float
    lipschitz_ratio: float
    grad_b_sup: float
    grad_b_uncertainty: float
    psi_sup: float
    psi_c1: float
    diffusion_floor: float
    grad_phi_sq: np.ndarray

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("bounded_ratio", "lipschitz_ratio", "grad_b_sup", "grad_b_uncertainty", "psi_sup", "psi_c1", "diffusion_floor")}
        d["max_grad_phi_sq"] = float(np.max(self.grad_phi_sq))
        return d


def bernstein_report(path, drift, diffusion_floor=1.0, grad_b=None):
    """Empirical constants of the two time-uniform gradient bounds for phi.

    ``path`` is a phi path or a u path (converted with phi = exp(-u/2)).
    The C1 norm of psi is taken as sup|psi| + sup|grad psi|.
    """
    phi = np.exp(-path.values / 2.0) if path.kind == "u" else path.values
    grid = path.grid
    T = path.horizon
    g2 = np.array([grad_sup_grid(phi[i], grid) ** 2 for i in range(phi.shape[0])])
    psi = phi[-1]
    psi_sup = float(np.max(np.abs(psi)))
    psi_c1 = psi_sup + grad_sup_grid(psi, grid)
    if grad_b is None:
        grad_b = drift.grad_sup(grid, _sample_times(T, path.time_steps))
    gb = grad_b.value
    M = float(diffusion_floor)
    times = path.times
    bounded = float(np.max((T - times) * g2)) / (psi_sup**3 * M * (T * gb + 1.0))
    lipschitz = float(np.max(g2)) / (psi_c1**3 * (1.0 + gb * M))
    return BernsteinReport(bounded, lipschitz, gb, grad_b.uncertainty, psi_sup, psi_c1, M, g2)


@dataclass(frozen=True)
class DualityReport:
    direct: float
    initial_term: float
    correction_term: float
    residual: float
    relative_residual: float

    @property
    def via_duality(self):
        return self.initial_term + self.correction_term


def duality_check(b1, b2, m1, m2, psi, horizon, time_steps):
    """Compare int psi d(m2 - m1)(T) computed directly and via the backward solution.

    m^i solve the Fokker-Planck equation with drift b^i from m_i; phi solves
    the backward equation with drift b^1. The residual is normalised by
    sup|psi| times the L1 distance of the two terminal densities.
    """
    grid = m1.grid
    cv = grid.cell_volume
    path1 = solve_fokker_planck(FPProblem(b1, m1, horizon, time_steps))
    path2 = solve_fokker_planck(FPProblem(b2, m2, horizon, time_steps))
    phi = solve_kbe(KBEProblem(b1, psi, grid, horizon, time_steps))
    direct = float(np.sum(psi * (path2.values[-1] - path1.values[-1])) * cv)
    initial = float(np.sum(phi.values[0] * (m2.values - m1.values)) * cv)
    spec = _Spectral(grid, 1.0)
    nodes = grid.nodes()
    integrand = np.empty(time_steps + 1)
    for i, t in enumerate(phi.times):
        g = spec.grad(np.fft.fftn(phi.values[i]))
        db = b2(t, nodes) - b1(t, nodes)
        dot = sum(g[a].ravel() * db[:, a] for a in range(grid.domain.dim))
        integrand[i] = float(np.sum(path2.values[i].ravel() * dot) * cv)
    correction = float(simpson(integrand, x=phi.times))
    resid = direct - (initial + correction)
    scale = float(np.max(np.abs(psi))) * float(np.sum(np.abs(path2.values[-1] - path1.values[-1])) * cv)
    return DualityReport(direct, initial, correction, resid, abs(resid) / max(scale, 1e-300))


def random_smooth_function(rng, grid, modes=3, amplitude=1.0):
    """Random real trigonometric polynomial of low degree on ``grid``."""
    x = grid.nodes()
    R = grid.domain.radius
    d = grid.domain.dim
    f = np.zeros(x.shape[0])
    for _ in range(modes):
        k = rng.integers(-modes, modes + 1, size=d)
        if not k.any():
            k[0] = 1
        f += amplitude * rng.normal() / math.sqrt(modes) * np.cos(2 * math.pi * (x @ k) / R + rng.uniform(0, 2 * math.pi))
    return f.reshape(grid.shape)


def random_smooth_density(rng, grid, modes=3):
    return GridDensity.from_values(grid, np.exp(random_smooth_function(rng, grid, modes)))


def random_trig_drift(rng, domain, modes=3, amplitude=1.0):
    """Random smooth time-dependent drift with analytic Jacobian."""
    d = domain.dim
    R = domain.radius
    ks = rng.integers(-modes, modes + 1, size=(modes, d))
    ks[~ks.any(axis=1), 0] = 1
    coef = amplitude * rng.normal(size=(modes, d)) / math.sqrt(modes)
    phase = rng.uniform(0, 2 * math.pi, size=modes)
    freq = rng.uniform(0, 2 * math.pi, size=modes)

    def fn(t, x):
        arg = 2 * math.pi * (x @ ks.T) / R + phase + freq * t
        return np.cos(arg) @ coef

    def jac(t, x):
        arg = 2 * math.pi * (x @ ks.T) / R + phase + freq * t
        s = -np.sin(arg)
        return np.einsum("pm,mi,mj->pij", s, coef, 2 * math.pi * ks / R)

    return DriftField(fn, domain, jacobian=jac, label="random-trig")
