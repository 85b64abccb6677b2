"""Euler-Maruyama simulation of the noising and denoising processes.

Noise for particle ``i`` at step ``k`` is a pure function of ``(seed, k, i)``:
each step opens a Philox stream keyed by the seed with the step index in the
counter, draws uniforms in particle order and maps pairs through Box-Muller.
Chunked or parallel execution therefore reproduces the serial result.
"""

from dataclasses import dataclass
import csv
import math

import numpy as np

from . import _kernels
from .distributions import Uniform, sample
from .errors import InvalidInputError, SimulationError
from .torus import ParticleEnsemble

_STREAM_NOISE = 0
_STREAM_INIT = 1


@dataclass(frozen=True)
class SdeConfig:
    horizon: float
    dt: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if not (self.horizon > 0 and self.dt > 0):
            raise InvalidInputError("horizon and dt must be positive")
        if self.n < 1:
            raise InvalidInputError("ensemble size must be at least 1")
        steps = round(self.horizon / self.dt)
        if steps < 1 or abs(steps * self.dt - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise InvalidInputError(f"dt={self.dt} does not divide T={self.horizon}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must be a 64-bit unsigned integer")

    @property
    def steps(self):
        return round(self.horizon / self.dt)


def stream(seed, step, kind=_STREAM_NOISE):
    """Counter-based generator for one (seed, step, kind) triple.

    Philox advances the low counter word as it draws, so step and kind sit in
    the high words and streams of different steps never overlap.
    """
    bg = np.random.Philox(key=int(seed), counter=[0, 0, int(step), int(kind)])
    return np.random.Generator(bg)


def step_uniforms(seed, step, count):
    """Uniforms for ``count`` normals (two per Box-Muller pair)."""
    return stream(seed, step).random(2 * ((count + 1) // 2))


def step_normals(seed, step, n, d):
    return _kernels.box_muller(step_uniforms(seed, step, n * d), n * d).reshape(n, d)


def _record_indices(cfg, record_times):
    if record_times is None:
        return {cfg.steps: cfg.horizon}
    out = {}
    for t in record_times:
        k = round(t / cfg.dt)
        if not 0 <= k <= cfg.steps or abs(k * cfg.dt - t) > 1e-9:
            raise InvalidInputError(f"record time {t} is not on the step grid")
        out[k] = float(t)
    return out


def _run(x, domain, cfg, drift_fn, record_times, first_step=0):
    rec = _record_indices(cfg, record_times)
    path = []
    if 0 in rec:
        path.append(ParticleEnsemble(domain, x.copy(), rec[0]))
    n, d = x.shape
    zero = np.zeros_like(x)
    for k in range(cfg.steps):
        t = k * cfg.dt
        drift = zero if drift_fn is None else drift_fn(k, t, x)
        _kernels.em_step(x, drift, cfg.dt, step_uniforms(cfg.seed, first_step + k, n * d), domain.radius)
        if k + 1 in rec:
            path.append(ParticleEnsemble(domain, x.copy(), rec[k + 1]))
    return path


def simulate_forward(dist, cfg, record_times=None):
    """Noising process from ``dist``: driftless, variance 2 dt per step and axis."""
    x = sample(dist, cfg.n, stream(cfg.seed, 0, _STREAM_INIT))
    return _run(x, dist.domain, cfg, None, record_times)


def simulate_reverse(score, cfg, initial=None, initial_points=None, early_stop=0.0, record_times=None):
    """Generative process with drift 2 s(T - t, x).

    The run covers ``[0, T - early_stop]``; ``cfg.horizon`` is the score
    horizon T and the number of steps is reduced accordingly.
    """
    domain = score.domain
    T = cfg.horizon
    if early_stop < 0 or early_stop >= T:
        raise InvalidInputError("early_stop must lie in [0, T)")
    if initial_points is not None:
        x = domain.as_points(initial_points).copy()
        if x.shape[0] != cfg.n:
            raise InvalidInputError("initial_points must contain cfg.n points")
    else:
        x = sample(initial if initial is not None else Uniform(domain), cfg.n, stream(cfg.seed, 0, _STREAM_INIT))
    run_T = T - early_stop
    run_cfg = cfg
    if early_stop > 0:
        run_cfg = SdeConfig(run_T, cfg.dt, cfg.n, cfg.seed)

    def drift(k, t, pts):
        try:
            s = score.evaluate(T - t, pts)
        except Exception as exc:
            raise SimulationError(f"score evaluation failed at step {k}: {exc}", step=k) from exc
        if not np.all(np.isfinite(s)):
            raise SimulationError(f"score returned non-finite values at step {k}", step=k)
        return 2.0 * s

    return _run(x, domain, run_cfg, drift, record_times)


def histogram_bins(n_particles, dim):
    """Bins per axis: n^(1/3) rounded to a power of two (at least 8)."""
    b = n_particles ** (1.0 / 3.0)
    return max(8, 2 ** int(round(math.log2(b))))


def export_csv(ensemble, path, cfg):
    """One row per particle, preceded by commented metadata lines."""
    d = ensemble.domain.dim
    with open(path, "w", newline="") as f:
        f.write(f"# seed={cfg.seed} dt={cfg.dt!r} T={cfg.horizon!r} R={ensemble.domain.radius!r} d={d} time={ensemble.time_stamp!r}\n")
        w = csv.writer(f)
        w.writerow(["x", "y"][:d])
        for p in ensemble.points:
            w.writerow([repr(float(c)) for c in p])


def load_csv(path, domain):
    rows = []
    meta = {}
    with open(path) as f:
        for line in f:
            if line.startswith("#"):
                meta = dict(kv.split("=", 1) for kv in line[1:].split())
                continue
            break
        for row in csv.reader(f):
            rows.append([float(v) for v in row])
    return ParticleEnsemble(domain, np.array(rows), float(meta.get("time", 0.0))), meta
