"""Score-matching functionals and the identities linking them.

    ESM  = int int |s_theta - grad log eta|^2 d eta ds
    ISM  = int int (|s_theta|^2 + 2 div s_theta) d eta ds
    DSM  = (1/N) sum_j int int |s_theta - grad log G(s)(x - z_j)|^2 G(s)(x - z_j) dx ds
    Fisher = int int |grad eta|^2 / eta dx ds

so ESM = ISM + Fisher, and DSM - ESM(eta^N) does not depend on s_theta.
Grid quadrature (Gauss-Legendre in time, periodic rectangle rule in space)
is the reference estimator; a Monte Carlo DSM estimator mirrors training.
"""

from dataclasses import dataclass, field, asdict
import math

import numpy as np

from . import _kernels
from .distributions import Empirical, HeatFlowLaw, entropy
from .errors import InvalidInputError, NoDensityError
from .heat import DEFAULT_CONFIG
from .torus import GridSpec

DEFAULT_TIME_NODES = 32


@dataclass(frozen=True)
class ObjectiveReport:
    value: float
    estimator: str
    window: tuple
    standard_error: float | None = None
    refinement_delta: float | None = None
    components: dict = field(default_factory=dict)
    grid_n: int | None = None
    time_nodes: int | None = None

    def to_dict(self):
        d = asdict(self)
        d["window"] = list(self.window)
        return d


def default_grid_n(domain):
    return 256 if domain.dim == 1 else 64


def time_quadrature(lo, hi, n=DEFAULT_TIME_NODES, log_time=True):
    """Gauss-Legendre nodes and weights on [lo, hi].

    With ``log_time`` and lo > 0 the rule is applied in u = log s, which
    resolves the 1/s behaviour of scores near small times.
    """
    if hi < lo:
        raise InvalidInputError("window must satisfy s_lo <= s_hi")
    if hi == lo:
        return np.array([]), np.array([])
    z, w = np.polynomial.legendre.leggauss(n)
    if log_time and lo > 0:
        a, b = math.log(lo), math.log(hi)
        u = 0.5 * (b - a) * z + 0.5 * (a + b)
        s = np.exp(u)
        return s, 0.5 * (b - a) * w * s
    return 0.5 * (hi - lo) * z + 0.5 * (hi + lo), 0.5 * (hi - lo) * w


def _check_window(window, score=None):
    lo, hi = (float(v) for v in window)
    if not (0 <= lo <= hi):
        raise InvalidInputError(f"invalid window {window}")
    if score is not None and hi > score.horizon * (1 + 1e-12):
        raise InvalidInputError(f"window {window} exceeds the score horizon {score.horizon}")
    return lo, hi


def _check_flow(flow, lo):
    if lo == 0 and not flow.has_density_at(0.0):
        raise NoDensityError("the flow has no density at s = 0; start the window at a positive time")


def _grid_integral(integrand_at, lo, hi, grid, n_time, log_time=True):
    """Sum over time nodes of per-slice spatial quadratures; returns component dict."""
    s_nodes, s_w = time_quadrature(lo, hi, n_time, log_time)
    x = grid.nodes()
    cv = grid.cell_volume
    total = {}
    for s, w in zip(s_nodes, s_w):
        for k, v in integrand_at(s, x).items():
            total[k] = total.get(k, 0.0) + w * float(np.sum(v)) * cv
    return total


def _esm_integrand(score, flow):
    def f(s, x):
        eta = flow.density(s, x)
        diff = score.evaluate(s, x) - flow.score(s, x)
        return {"value": np.sum(diff**2, axis=1) * eta}
    return f


def _ism_integrand(score, flow):
    def f(s, x):
        eta = flow.density(s, x)
        sv = score.evaluate(s, x)
        return {"square": np.sum(sv**2, axis=1) * eta, "divergence": 2.0 * score.divergence(s, x) * eta}
    return f


def _with_refinement(integrand, lo, hi, domain, grid_n, n_time):
    grid = GridSpec(grid_n, domain)
    main = _grid_integral(integrand, lo, hi, grid, n_time)
    coarse = _grid_integral(integrand, lo, hi, GridSpec(grid_n // 2, domain), n_time) if grid_n >= 16 else main
    return main, coarse


def esm_objective(score, flow, window, grid_n=None, n_time=DEFAULT_TIME_NODES):
    """Explicit score matching against the flow of ``flow.base`` over ``window``."""
    lo, hi = _check_window(window, score)
    _check_flow(flow, lo)
    grid_n = grid_n or default_grid_n(flow.domain)
    main, coarse = _with_refinement(_esm_integrand(score, flow), lo, hi, flow.domain, grid_n, n_time)
    v = main.get("value", 0.0)
    return ObjectiveReport(v, "grid-quadrature", (lo, hi), refinement_delta=abs(v - coarse.get("value", 0.0)),
                           components={"value": v}, grid_n=grid_n, time_nodes=n_time)


def ism_objective(score, flow, window, grid_n=None, n_time=DEFAULT_TIME_NODES):
    """Implicit score matching; divergence comes from ``score.divergence``."""
    lo, hi = _check_window(window, score)
    _check_flow(flow, lo)
    grid_n = grid_n or default_grid_n(flow.domain)
    main, coarse = _with_refinement(_ism_integrand(score, flow), lo, hi, flow.domain, grid_n, n_time)
    v = main.get("square", 0.0) + main.get("divergence", 0.0)
    vc = coarse.get("square", 0.0) + coarse.get("divergence", 0.0)
    return ObjectiveReport(v, "grid-quadrature", (lo, hi), refinement_delta=abs(v - vc),
                           components={"square": main.get("square", 0.0), "divergence": main.get("divergence", 0.0)},
                           grid_n=grid_n, time_nodes=n_time)


def fisher_term(flow, window, grid_n=None, n_time=DEFAULT_TIME_NODES):
    """int int |grad eta|^2 / eta over the window by quadrature."""
    lo, hi = _check_window(window)
    if hi == lo:
        return 0.0
    _check_flow(flow, lo)
    grid = GridSpec(grid_n or default_grid_n(flow.domain), flow.domain)

    def f(s, x):
        return {"value": np.sum(flow.score(s, x) ** 2, axis=1) * flow.density(s, x)}

    return _grid_integral(f, lo, hi, grid, n_time).get("value", 0.0)


def fisher_entropy_route(flow, window, grid_n=None):
    """Same quantity via the entropy decay: H(eta(s_lo)) - H(eta(s_hi))."""
    lo, hi = _check_window(window)
    _check_flow(flow, lo)
    grid = GridSpec(grid_n or default_grid_n(flow.domain), flow.domain)
    return entropy(flow.grid_density(lo, grid)) - entropy(flow.grid_density(hi, grid))


def _dsm_grid(score, sample, lo, hi, grid, n_time, config):
    s_nodes, s_w = time_quadrature(lo, hi, n_time)
    x = grid.nodes()
    cv = grid.cell_volume
    R = grid.domain.radius
    N = len(sample)
    total = 0.0
    for s, w in zip(s_nodes, s_w):
        sv = score.evaluate(s, x)
        acc = 0.0
        for z in sample.points:
            logk, ks, _ = _kernels.mixture_eval(x - z, np.zeros((1, x.shape[1])), np.array([s]), np.zeros(1), R,
                                                config.image_truncation, config.spectral_cutoff, config.crossover(R))
            acc += float(np.sum(np.sum((sv - ks) ** 2, axis=1) * np.exp(logk)))
        total += w * acc * cv / N
    return total


def dsm_objective(score, sample, eps, T, estimator="grid-quadrature", grid_n=None, n_time=DEFAULT_TIME_NODES,
                  mc_samples=20000, seed=0, config=DEFAULT_CONFIG):
    """Denoising score matching over [eps, T] for the empirical ``sample``."""
    if not (np.isfinite(eps) and eps > 0):
        raise InvalidInputError("DSM needs eps > 0")
    if not isinstance(sample, Empirical):
        raise InvalidInputError("DSM is defined for an empirical sample")
    lo, hi = _check_window((eps, T), score)
    if estimator == "grid-quadrature":
        grid_n = grid_n or default_grid_n(sample.domain)
        v = _dsm_grid(score, sample, lo, hi, GridSpec(grid_n, sample.domain), n_time, config)
        vc = _dsm_grid(score, sample, lo, hi, GridSpec(grid_n // 2, sample.domain), n_time, config)
        return ObjectiveReport(v, estimator, (lo, hi), refinement_delta=abs(v - vc), components={"value": v},
                               grid_n=grid_n, time_nodes=n_time)
    if estimator == "monte-carlo":
        from .score import dsm_batch

        rng = np.random.default_rng(seed)
        vals = []
        chunk = 2048
        done = 0
        while done < mc_samples:
            b = min(chunk, mc_samples - done)
            s, x, target, weight = dsm_batch(rng, np.asarray(sample.points), lo, hi, b, False, sample.domain, config)
            out = np.array([score.evaluate(si, xi[None, :])[0] for si, xi in zip(s, x)]) if not hasattr(score, "evaluate_batch") \
                else score.evaluate_batch(s, x)
            vals.append(weight * np.sum((out - target) ** 2, axis=1))
            done += b
        v = np.concatenate(vals)
        return ObjectiveReport(float(v.mean()), estimator, (lo, hi), standard_error=float(v.std(ddof=1) / math.sqrt(v.size)),
                               components={"value": float(v.mean())})
    raise InvalidInputError(f"unknown estimator {estimator}")


def dsm_floor_by_variance(sample, eps, T, grid_n=2048, n_time=64, config=DEFAULT_CONFIG):
    """Irreducible DSM value at the exact empirical-flow score.

    Computed as the posterior variance of the per-point kernel scores,
    int int sum_j (G_j / N) |g_j - sum_k r_k g_k|^2 dx ds, on a fine grid with
    time quadrature in log s. Independent of ``dsm_objective``'s code path.
    """
    grid = GridSpec(grid_n, sample.domain)
    x = grid.nodes()
    R = sample.domain.radius
    N = len(sample)
    s_nodes, s_w = time_quadrature(eps, T, n_time)
    total = 0.0
    for s, w in zip(s_nodes, s_w):
        dens = []
        grads = []
        for z in sample.points:
            logk, ks, _ = _kernels.mixture_eval(x - z, np.zeros((1, x.shape[1])), np.array([s]), np.zeros(1), R,
                                                config.image_truncation, config.spectral_cutoff, config.crossover(R))
            dens.append(np.exp(logk) / N)
            grads.append(ks)
        dens = np.array(dens)
        grads = np.array(grads)
        eta = dens.sum(0)
        mean = np.einsum("jp,jpa->pa", dens, grads) / eta[:, None]
        var = np.einsum("jp,jp->p", dens, np.sum((grads - mean[None]) ** 2, axis=2))
        total += w * float(var.sum()) * grid.cell_volume
    return total


@dataclass(frozen=True)
class IdentityReport:
    esm: float
    ism: float
    fisher: float
    fisher_entropy: float
    residual_a: float
    relative_a: float
    fisher_gap: float
    dsm: float | None = None
    esm_empirical: float | None = None
    dsm_floor: float | None = None
    residual_b: float | None = None
    relative_b: float | None = None

    def to_dict(self):
        return asdict(self)


def verify_identities(score, flow, window, sample=None, eps=None, T=None, grid_n=None, n_time=DEFAULT_TIME_NODES):
    """Residuals of ESM = ISM + Fisher and, given a sample, of DSM = ESM + floor.

    The floor in (b) is the DSM value of the exact empirical-flow score, so
    ``residual_b = DSM(s) - ESM(eta^N, s) - DSM(grad log eta^N)``.
    """
    esm = esm_objective(score, flow, window, grid_n, n_time).value
    ism = ism_objective(score, flow, window, grid_n, n_time).value
    fis = fisher_term(flow, window, grid_n, n_time)
    fis_e = fisher_entropy_route(flow, window, grid_n)
    res_a = esm - ism - fis
    rep = dict(esm=esm, ism=ism, fisher=fis, fisher_entropy=fis_e, residual_a=res_a, relative_a=abs(res_a) / (1 + esm),
               fisher_gap=abs(fis - fis_e) / max(abs(fis), 1e-300) if fis != 0 else abs(fis_e))
    if sample is not None:
        from .score import ExactScore

        n_flow = HeatFlowLaw(sample, flow.config)
        dsm = dsm_objective(score, sample, eps, T, grid_n=grid_n, n_time=n_time).value
        esm_n = esm_objective(score, n_flow, (eps, T), grid_n, n_time).value
        floor = dsm_objective(ExactScore(sample, score.horizon), sample, eps, T, grid_n=grid_n, n_time=n_time).value
        res_b = dsm - esm_n - floor
        rep.update(dsm=dsm, esm_empirical=esm_n, dsm_floor=floor, residual_b=res_b, relative_b=abs(res_b) / max(abs(dsm), 1e-300))
    return IdentityReport(**rep)
