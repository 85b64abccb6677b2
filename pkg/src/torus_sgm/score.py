"""Time-dependent score fields s(t, x) and denoising score-matching training.

All fields evaluate on ``(P, d)`` point arrays and return ``(P, d)``. The
trainable ``PeriodicNetScore`` is a two-hidden-layer tanh network on Fourier
features of x and a log-time embedding, so it is exactly R-periodic.
"""

from dataclasses import dataclass, field
import csv
import math
import struct

import numpy as np

from . import _kernels
from .distributions import HeatFlowLaw, flow_score, flow_score_jacobian
from .errors import InvalidInputError, TrainingDivergedError
from .heat import DEFAULT_CONFIG
from .torus import GridSpec

PROVENANCES = ("exact", "perturbed", "trained", "tabulated")


class ScoreField:
    """Base class; subclasses implement ``_eval`` and optionally ``_jac``."""

    provenance = "exact"

    def __init__(self, domain, horizon):
        if not horizon > 0:
            raise InvalidInputError("score horizon must be positive")
        self.domain = domain
        self.horizon = float(horizon)

    def _check(self, t, x):
        if not (np.isfinite(t) and -1e-12 * self.horizon <= t <= self.horizon * (1 + 1e-12)):
            raise InvalidInputError(f"time {t} outside the score horizon [0, {self.horizon}]")
        return min(max(float(t), 0.0), self.horizon), self.domain.as_points(x)

    def evaluate(self, t, x):
        t, x = self._check(t, x)
        return self._eval(t, x)

    def jacobian(self, t, x):
        """Spatial Jacobian ``J[p, i, j] = d s_i / d x_j``."""
        t, x = self._check(t, x)
        return self._jac(t, x)

    def divergence(self, t, x):
        return np.trace(self.jacobian(t, x), axis1=1, axis2=2)

    def _jac(self, t, x, h=None):
        h = 1e-5 * self.domain.radius if h is None else h
        d = x.shape[1]
        J = np.empty((x.shape[0], d, d))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            J[:, :, j] = (self._eval(t, x + e) - self._eval(t, x - e)) / (2 * h)
        return J

    def __call__(self, t, x):
        return self.evaluate(t, x)


class ExactScore(ScoreField):
    """grad log eta(t, .) of a target distribution's heat flow."""

    provenance = "exact"

    def __init__(self, dist, horizon, config=DEFAULT_CONFIG):
        super().__init__(dist.domain, horizon)
        self.dist = dist
        self.config = config

    @property
    def flow(self):
        return HeatFlowLaw(self.dist, self.config)

    def _eval(self, t, x):
        return flow_score(self.dist, t, x, self.config)

    def _jac(self, t, x):
        return flow_score_jacobian(self.dist, t, x, self.config)


class FunctionScore(ScoreField):
    """Score given by plain callables ``fn(t, x)`` and optionally ``jac(t, x)``."""

    def __init__(self, fn, domain, horizon, jac=None, provenance="tabulated"):
        super().__init__(domain, horizon)
        if provenance not in PROVENANCES:
            raise InvalidInputError(f"unknown provenance {provenance}")
        self._fn = fn
        self._jacfn = jac
        self.provenance = provenance

    def _eval(self, t, x):
        return np.asarray(self._fn(t, x), dtype=float).reshape(x.shape)

    def _jac(self, t, x):
        if self._jacfn is None:
            return super()._jac(t, x)
        return np.asarray(self._jacfn(t, x), dtype=float)

    @classmethod
    def zero(cls, domain, horizon):
        return cls(lambda t, x: np.zeros_like(x), domain, horizon, jac=lambda t, x: np.zeros(x.shape + (x.shape[1],)), provenance="exact")


class Direction:
    """Bounded perturbation direction g(t, x), rescaled so that sup |g| <= 1."""

    def __init__(self, fn, domain, jac=None, horizon=1.0, normalise=True):
        self._fn = fn
        self._jacfn = jac
        self.domain = domain
        self.scale = 1.0
        if normalise:
            n = 256 if domain.dim == 1 else 64
            x = GridSpec(n, domain).nodes()
            sup = max(float(np.max(np.linalg.norm(fn(t, x), axis=1))) for t in np.linspace(0, horizon, 17))
            if sup > 1.0:
                self.scale = 1.0 / sup

    def __call__(self, t, x):
        return self.scale * np.asarray(self._fn(t, x), dtype=float).reshape(x.shape)

    def jacobian(self, t, x):
        if self._jacfn is None:
            return None
        return self.scale * np.asarray(self._jacfn(t, x), dtype=float)

    @classmethod
    def constant(cls, domain, vector):
        v = np.asarray(vector, dtype=float)
        v = v / np.linalg.norm(v)
        return cls(lambda t, x: np.broadcast_to(v, x.shape).copy(), domain, jac=lambda t, x: np.zeros(x.shape + (x.shape[1],)), normalise=False)

    @classmethod
    def fourier(cls, domain, mode=1, axis=0, phase=0.0):
        """g = sin(2 pi k x_axis / R + phase) e_axis."""
        w = 2 * math.pi * mode / domain.radius

        def fn(t, x):
            out = np.zeros_like(x)
            out[:, axis] = np.sin(w * x[:, axis] + phase)
            return out

        def jac(t, x):
            J = np.zeros(x.shape + (x.shape[1],))
            J[:, axis, axis] = w * np.cos(w * x[:, axis] + phase)
            return J

        return cls(fn, domain, jac=jac, normalise=False)


class PerturbedScore(ScoreField):
    """s = base + magnitude * g with sup |g| <= 1."""

    provenance = "perturbed"

    def __init__(self, base, direction, magnitude):
        super().__init__(base.domain, base.horizon)
        if magnitude < 0:
            raise InvalidInputError("perturbation magnitude must be nonnegative")
        self.base = base
        self.direction = direction
        self.magnitude = float(magnitude)

    def _eval(self, t, x):
        s = self.base._eval(t, x)
        if self.magnitude == 0:
            return s
        return s + self.magnitude * self.direction(t, x)

    def _jac(self, t, x):
        J = self.base._jac(t, x)
        if self.magnitude == 0:
            return J
        G = self.direction.jacobian(t, x)
        if G is None:
            return ScoreField._jac(self, t, x)
        return J + self.magnitude * G


class TabulatedScore(ScoreField):
    """Values on grid nodes and stored times; linear interpolation in t and x."""

    provenance = "tabulated"

    def __init__(self, grid, times, values, horizon=None):
        times = np.asarray(times, dtype=float)
        super().__init__(grid.domain, horizon if horizon is not None else float(times[-1]))
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError("tabulation times must increase")
        self.grid = grid
        self.times = times
        self.values = np.asarray(values, dtype=float).reshape((times.size,) + grid.shape + (grid.domain.dim,))

    @classmethod
    def from_score(cls, score, grid, times):
        x = grid.nodes()
        vals = np.array([score.evaluate(t, x) for t in times])
        return cls(grid, times, vals, score.horizon)

    def _spatial(self, i, x):
        g = self.grid
        u = x / g.h
        lo = np.floor(u).astype(int)
        fr = u - lo
        lo %= g.n
        hi = (lo + 1) % g.n
        v = self.values[i]
        if g.domain.dim == 1:
            return v[lo[:, 0]] * (1 - fr) + v[hi[:, 0]] * fr
        a, b = fr[:, 0:1], fr[:, 1:2]
        return (v[lo[:, 0], lo[:, 1]] * (1 - a) * (1 - b) + v[hi[:, 0], lo[:, 1]] * a * (1 - b)
                + v[lo[:, 0], hi[:, 1]] * (1 - a) * b + v[hi[:, 0], hi[:, 1]] * a * b)

    def _eval(self, t, x):
        i = int(np.clip(np.searchsorted(self.times, t) - 1, 0, self.times.size - 2)) if self.times.size > 1 else 0
        if self.times.size == 1:
            return self._spatial(0, x)
        t0, t1 = self.times[i], self.times[i + 1]
        w = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
        if w == 0.0:
            return self._spatial(i, x)
        if w == 1.0:
            return self._spatial(i + 1, x)
        return (1 - w) * self._spatial(i, x) + w * self._spatial(i + 1, x)


def _feature_vectors(d, F):
    """Integer frequency vectors: 1..F in 1-d, a half lattice with |k|_inf <= F in 2-d."""
    if d == 1:
        return np.arange(1, F + 1)[:, None].astype(float)
    ks = [(a, b) for a in range(0, F + 1) for b in range(-F, F + 1) if a > 0 or b > 0]
    return np.array(ks, dtype=float)


class PeriodicNetScore(ScoreField):
    """Two-layer tanh network on periodic features, output scaled by 1/sigma(t).

    ``sigma(t) = sqrt(2 (t + t_min))`` matches the natural size of kernel
    scores, so the raw network output stays of order one for all t.
    """

    provenance = "trained"
    _MAGIC = b"TSGMNET1"
    _VERSION = 1
    _TIME_FREQS = 3

    def __init__(self, domain, horizon, fourier_order=6, width=32, t_min=1e-3, params=None, seed=0):
        super().__init__(domain, horizon)
        if not (1 <= fourier_order <= 16 and 1 <= width <= 256):
            raise InvalidInputError("fourier_order and width out of range")
        if not t_min > 0:
            raise InvalidInputError("t_min must be positive")
        self.F = int(fourier_order)
        self.W = int(width)
        self.t_min = float(t_min)
        self.kvecs = _feature_vectors(domain.dim, self.F)
        self.n_in = 2 * self.kvecs.shape[0] + 1 + 2 * self._TIME_FREQS
        d = domain.dim
        self._shapes = [("W1", (self.W, self.n_in)), ("b1", (self.W,)), ("W2", (self.W, self.W)), ("b2", (self.W,)), ("W3", (d, self.W)), ("b3", (d,))]
        n_params = sum(int(np.prod(s)) for _, s in self._shapes)
        if params is None:
            rng = np.random.default_rng(seed)
            blocks = []
            for name, shape in self._shapes:
                if not name.startswith("W"):
                    blocks.append(np.zeros(shape).ravel())
                    continue
                w = rng.normal(0, 1 / math.sqrt(shape[-1]), size=shape)
                if name == "W1":
                    # damp high frequencies so the untrained field is smooth
                    kn = np.linalg.norm(self.kvecs, axis=1)
                    w[:, : 2 * kn.size] /= np.concatenate([kn, kn])
                blocks.append(w.ravel())
            params = np.concatenate(blocks)
        params = np.array(params, dtype=float)
        if params.shape != (n_params,) or not np.all(np.isfinite(params)):
            raise InvalidInputError("parameter vector has the wrong size or non-finite entries")
        self.theta = params

    @property
    def n_params(self):
        return self.theta.size

    def copy_with(self, theta):
        return PeriodicNetScore(self.domain, self.horizon, self.F, self.W, self.t_min, theta)

    def _unpack(self, theta):
        out = {}
        i = 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = theta[i:i + n].reshape(shape)
            i += n
        return out

    def sigma(self, t):
        return np.sqrt(2.0 * (np.asarray(t, dtype=float) + self.t_min))

    def _time_features(self, t):
        t = np.asarray(t, dtype=float)
        lo = math.log(self.t_min)
        hi = math.log(self.horizon + self.t_min)
        tau = 2.0 * (np.log(t + self.t_min) - lo) / (hi - lo) - 1.0
        j = np.arange(1, self._TIME_FREQS + 1)
        ang = math.pi * tau[:, None] * j
        return np.column_stack([tau, np.sin(ang), np.cos(ang)])

    def _features(self, t, x):
        """Input vector (B, n_in) and its x-derivative (d, B, n_in)."""
        w = 2 * math.pi / self.domain.radius
        ph = w * (x @ self.kvecs.T)
        s, c = np.sin(ph), np.cos(ph)
        tf = self._time_features(t)
        z = np.concatenate([s, c, tf], axis=1)
        dz = []
        for a in range(self.domain.dim):
            ka = w * self.kvecs[:, a]
            dz.append(np.concatenate([c * ka, -s * ka, np.zeros_like(tf)], axis=1))
        return z, np.array(dz)

    def _forward(self, theta, t, x, want_jac=False):
        p = self._unpack(theta)
        z, dz = self._features(t, x)
        a1 = z @ p["W1"].T + p["b1"]
        h1 = np.tanh(a1)
        a2 = h1 @ p["W2"].T + p["b2"]
        h2 = np.tanh(a2)
        inv_sig = 1.0 / self.sigma(t)[:, None]
        out = (h2 @ p["W3"].T + p["b3"]) * inv_sig
        cache = (p, z, h1, h2, inv_sig)
        if not want_jac:
            return out, cache
        g1 = 1 - h1**2
        g2 = 1 - h2**2
        J = np.empty(x.shape + (x.shape[1],))
        for a in range(x.shape[1]):
            d1 = g1 * (dz[a] @ p["W1"].T)
            d2 = g2 * (d1 @ p["W2"].T)
            J[:, :, a] = (d2 @ p["W3"].T) * inv_sig
        return out, J

    def _eval(self, t, x):
        tt = np.full(x.shape[0], t)
        return self._forward(self.theta, tt, x)[0]

    def _jac(self, t, x):
        tt = np.full(x.shape[0], t)
        return self._forward(self.theta, tt, x, want_jac=True)[1]

    def evaluate_batch(self, t, x):
        """Evaluate at per-sample times ``t`` (shape (B,))."""
        return self._forward(self.theta, np.asarray(t, dtype=float), self.domain.as_points(x))[0]

    def loss_and_grad(self, theta, t, x, target, weight):
        """Weighted mean squared error and its gradient with respect to theta."""
        out, (p, z, h1, h2, inv_sig) = self._forward(theta, t, x)
        r = out - target
        B = x.shape[0]
        loss = float(np.sum(weight * np.sum(r**2, axis=1)) / B)
        dout = 2.0 * weight[:, None] * r / B * inv_sig
        gW3 = dout.T @ h2
        gb3 = dout.sum(0)
        da2 = (dout @ p["W3"]) * (1 - h2**2)
        gW2 = da2.T @ h1
        gb2 = da2.sum(0)
        da1 = (da2 @ p["W2"]) * (1 - h1**2)
        gW1 = da1.T @ z
        gb1 = da1.sum(0)
        grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2, gW3.ravel(), gb3])
        return loss, grad

    def save(self, path):
        """Binary layout: magic, int64 version, F, W, d; float64 R, T, t_min; doubles."""
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<qqqqddd", self._VERSION, self.F, self.W, self.domain.dim, self.domain.radius, self.horizon, self.t_min))
            f.write(np.ascontiguousarray(self.theta, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        from .torus import TorusDomain

        with open(path, "rb") as f:
            if f.read(8) != cls._MAGIC:
                raise InvalidInputError("not a network weight file")
            version, F, W, d, R, T, t_min = struct.unpack("<qqqqddd", f.read(56))
            if version != cls._VERSION:
                raise InvalidInputError(f"unsupported weight file version {version}")
            theta = np.frombuffer(f.read(), dtype="<f8").copy()
        return cls(TorusDomain(R, d), T, F, W, t_min, theta)


@dataclass(frozen=True)
class DsmTrainConfig:
    """Hyperparameters for ``train_dsm``.

    Times are drawn log-uniformly on [eps, T] and reweighted by
    ``s log(T/eps)``, so each batch loss is an unbiased estimate of the DSM
    objective with uniform time weighting; antithetic noise pairs (xi, -xi)
    reduce variance further.
    """

    steps: int = 2000
    batch: int = 256
    lr: float = 3e-3
    momentum: float = 0.9
    seed: int = 0
    antithetic: bool = True
    grad_clip: float = 100.0
    smoothing: float = 0.25


@dataclass
class TrainTrace:
    loss: np.ndarray
    final_loss: float
    final_se: float
    config: DsmTrainConfig

    def smoothed(self, window=None):
        window = window or max(1, len(self.loss) // 50)
        kernel = np.ones(window) / window
        return np.convolve(self.loss, kernel, mode="valid")

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.loss):
                w.writerow([i, repr(float(v))])


def dsm_batch(rng, points, eps, T, batch, antithetic, domain, config=DEFAULT_CONFIG):
    """One DSM minibatch: times, noised points, kernel-score targets, weights."""
    half = batch // 2 if antithetic else batch
    N, d = points.shape
    u = rng.random(half)
    s = eps * (T / eps) ** u
    j = rng.integers(0, N, size=half)
    xi = rng.standard_normal((half, d))
    if antithetic:
        s = np.concatenate([s, s])
        j = np.concatenate([j, j])
        xi = np.concatenate([xi, -xi])
    disp = np.sqrt(2 * s)[:, None] * xi
    x = domain.wrap_array(points[j] + disp)
    R = domain.radius
    target = _kernels.kernel_score(disp, s, R, config.image_truncation, config.spectral_cutoff, config.crossover(R))
    weight = s * math.log(T / eps)
    return s, x, target, weight


def train_dsm(model, sample_measure, eps, T, config=DsmTrainConfig()):
    """Fit ``model`` to the DSM objective over [eps, T]; returns (model, trace).

    The reported ``final_loss`` is the mean batch loss over the last
    ``config.smoothing`` fraction of steps and ``final_se`` its standard
    error from batch-to-batch scatter.
    """
    if not (eps > 0 and T > eps):
        raise InvalidInputError("need 0 < eps < T for a nonempty training window")
    if abs(T - model.horizon) > 1e-12 * T:
        raise InvalidInputError("model horizon must equal T")
    rng = np.random.default_rng(config.seed)
    theta = model.theta.copy()
    vel = np.zeros_like(theta)
    losses = np.empty(config.steps)
    pts = np.asarray(sample_measure.points)
    for k in range(config.steps):
        s, x, target, weight = dsm_batch(rng, pts, eps, T, config.batch, config.antithetic, model.domain)
        loss, g = model.loss_and_grad(theta, s, x, target, weight)
        losses[k] = loss
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingDivergedError(f"DSM loss diverged at step {k}: {loss}", trace=losses[: k + 1].copy())
        gn = np.linalg.norm(g)
        if gn > config.grad_clip:
            g *= config.grad_clip / gn
        lr = config.lr * 0.5 * (1 + math.cos(math.pi * k / config.steps))
        vel = config.momentum * vel - lr * g
        theta = theta + vel
    tail = losses[int(config.steps * (1 - config.smoothing)):]
    if tail.size == 0:
        tail = losses[-1:]
    se = float(tail.std(ddof=1) / math.sqrt(tail.size)) if tail.size > 1 else float("nan")
    return model.copy_with(theta), TrainTrace(losses, float(tail.mean()), se, config)


@dataclass(frozen=True)
class CkNormEstimate:
    c0: float
    c1: float
    c2: float
    grid_n: int
    uncertainty: float
    flagged: bool
    coarse: tuple = field(default=())

    @property
    def c2_norm(self):
        """Aggregate C2 norm: max of sup-norms of s and its first and second derivatives."""
        return max(self.c0, self.c1, self.c2)

    def to_dict(self):
        return {"c0": self.c0, "c1": self.c1, "c2": self.c2, "c2_norm": self.c2_norm, "grid_n": self.grid_n,
                "uncertainty": self.uncertainty, "flagged": self.flagged}


def _norms_level(score, n, times):
    grid = GridSpec(n, score.domain)
    x = grid.nodes()
    h = grid.h
    d = score.domain.dim
    c0 = c1 = c2 = 0.0
    E = np.eye(d) * h
    for t in times:
        s0 = score.evaluate(t, x)
        c0 = max(c0, float(np.max(np.abs(s0))))
        sp = [score.evaluate(t, x + E[j]) for j in range(d)]
        sm = [score.evaluate(t, x - E[j]) for j in range(d)]
        for j in range(d):
            c1 = max(c1, float(np.max(np.abs(sp[j] - sm[j]))) / (2 * h))
            c2 = max(c2, float(np.max(np.abs(sp[j] - 2 * s0 + sm[j]))) / h**2)
        if d == 2:
            spp = score.evaluate(t, x + E[0] + E[1])
            smm = score.evaluate(t, x - E[0] - E[1])
            spm = score.evaluate(t, x + E[0] - E[1])
            smp = score.evaluate(t, x - E[0] + E[1])
            c2 = max(c2, float(np.max(np.abs(spp - spm - smp + smm))) / (4 * h * h))
    return c0, c1, c2


def estimate_norms(score, grid_n, times):
    """Sup norms of s, its first and second spatial differences, refined once."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    coarse = _norms_level(score, grid_n, times)
    fine = _norms_level(score, 2 * grid_n, times)
    rel = [abs(f - c) / f if f > 0 else 0.0 for f, c in zip(fine, coarse)]
    unc = max(rel)
    decreasing = any(f < c * (1 - 1e-3) - 1e-12 for f, c in zip(fine, coarse))
    return CkNormEstimate(fine[0], fine[1], fine[2], 2 * grid_n, unc, bool(unc > 0.5 or decreasing), coarse)
