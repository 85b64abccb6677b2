"""Built-in check suites run by ``torus-sgm verify``.

Every check runs at pinned seeds and grids and returns (name, passed, detail).
"""

import itertools
import math

import numpy as np

from . import _kernels
from . import certificates as cert
from .distributions import Empirical, HeatFlowLaw, WrappedGaussianMixture, flow_grid
from .heat import DEFAULT_CONFIG, convolve_heat, heat_kernel, heat_kernel_grad
from .metrics import w1_circle, w1_empirical, w1_grid
from .objectives import verify_identities
from .pde import (DriftField, FPProblem, duality_check, random_smooth_density, random_smooth_function,
                  random_trig_drift, solve_fokker_planck)
from .score import Direction, ExactScore, FunctionScore, PerturbedScore
from .torus import GridDensity, GridSpec, TorusDomain, pairwise_distance

SUITES = ("identities", "kernels", "metrics", "pde", "certificates")


def _check(name, value, tol, detail=None):
    ok = bool(np.isfinite(value) and value <= tol)
    return {"check": name, "passed": ok, "value": float(value), "tolerance": tol, **({"detail": detail} if detail else {})}


def demo_mixture(R=1.0):
    dom = TorusDomain(R, 1)
    return WrappedGaussianMixture(dom, [0.6, 0.4], [[0.3 * R], [0.7 * R]], [0.01 * R * R, 0.02 * R * R])


def exhaustive_circle_w1(a, b, R):
    """min over all matchings of the mean geodesic distance (equal sizes)."""
    n = a.size
    d = np.abs(a[:, None] - b[None, :]) % R
    C = np.minimum(d, R - d)
    perms = np.array(list(itertools.permutations(range(n))))
    return float(C[np.arange(n), perms].sum(axis=1).min() / n)


def suite_kernels():
    out = []
    for R in (1.0, 2.0):
        dom = TorusDomain(R, 1)
        grid = GridSpec(512, dom)
        x = grid.nodes()
        for t in (1e-3, 0.02, 0.5):
            mass = float(np.sum(heat_kernel(dom, t, x)) * grid.cell_volume)
            out.append(_check(f"normalisation R={R} t={t}", abs(mass - 1), 1e-10))
        m = GridDensity.from_values(grid, np.asarray(heat_kernel(dom, 0.01, x - 0.3 * R)).reshape(grid.shape))
        two = convolve_heat(convolve_heat(m, 0.02), 0.03)
        one = convolve_heat(m, 0.05)
        out.append(_check(f"semigroup R={R}", float(np.max(np.abs(two.values - one.values))), 1e-10))
        h = 1e-5
        y = np.array([[0.1 * R], [0.37 * R]])
        fd = np.ravel(heat_kernel(dom, 0.03, y + h) - heat_kernel(dom, 0.03, y - h)) / (2 * h)
        g = np.asarray(heat_kernel_grad(dom, 0.03, y)).reshape(-1)
        out.append(_check(f"gradient R={R}", float(np.max(np.abs(fd - g) / np.abs(g))), 1e-6))
    rng = np.random.default_rng(0)
    xs = rng.random((200, 2))
    means = rng.random((5, 2))
    times = np.array([1e-3, 0.01, 0.05, 0.1, 0.5])
    logw = np.log(np.full(5, 0.2))
    args = (xs, means, times, logw, 1.0, DEFAULT_CONFIG.image_truncation, DEFAULT_CONFIG.spectral_cutoff,
            DEFAULT_CONFIG.crossover(1.0), 2)
    a = _kernels.mixture_eval(*args, use_jit=True)
    b = _kernels.mixture_eval(*args, use_jit=False)
    err = max(float(np.max(np.abs(u - v))) for u, v in zip(a, b))
    out.append(_check("jit and numpy paths agree", err, 1e-9))
    return out


def suite_metrics():
    out = []
    rng = np.random.default_rng(0)
    worst = 0.0
    dom = TorusDomain(1.0, 1)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        a, b = rng.random(n), rng.random(n)
        got = w1_circle(Empirical(dom, a[:, None]), Empirical(dom, b[:, None])).distance
        worst = max(worst, abs(got - exhaustive_circle_w1(a, b, 1.0)))
    out.append(_check("circle W1 vs exhaustive matching", worst, 1e-12))
    dom2 = TorusDomain(1.0, 2)
    g = GridSpec(8, dom2)
    viol = 0.0
    for k in range(5):
        m1 = random_smooth_density(np.random.default_rng(10 + k), g)
        m2 = random_smooth_density(np.random.default_rng(20 + k), g)
        exact = w1_grid(m1, m2, method="grid-LP").distance
        ent = w1_grid(m1, m2, method="entropic", reg=0.02)
        viol = max(viol, max(0.0, abs(ent.distance - exact) - ent.bound))
    out.append(_check("entropic W1 within certified bound", viol, 1e-12))
    pa = rng.random((40, 2))
    pb = rng.random((40, 2))
    from scipy.optimize import linprog

    C = pairwise_distance(dom2, pa, pb).ravel()
    n = 40
    A = np.zeros((2 * n, n * n))
    for i in range(n):
        A[i, i * n:(i + 1) * n] = 1
        A[n + i, i::n] = 1
    lp = linprog(C, A_eq=A, b_eq=np.full(2 * n, 1 / n), bounds=(0, None), method="highs").fun
    got = w1_empirical(Empirical(dom2, pa), Empirical(dom2, pb)).distance
    out.append(_check("2-d point cloud W1 vs LP", abs(got - lp), 1e-9))
    return out


def suite_identities():
    pi = demo_mixture()
    flow = HeatFlowLaw(pi)
    exact = ExactScore(pi, 1.0)
    out = []
    smp = Empirical(pi.domain, np.array([[0.1], [0.35], [0.4], [0.8]]))
    consts = []
    for name, sc in (("exact", exact), ("zero", FunctionScore.zero(pi.domain, 1.0)),
                     ("perturbed", PerturbedScore(exact, Direction.fourier(pi.domain, 2), 0.5))):
        rep = verify_identities(sc, flow, (0.01, 1.0), smp, 0.05, 1.0)
        out.append(_check(f"ESM = ISM + Fisher ({name})", rep.relative_a, 1e-3))
        consts.append(rep.dsm - rep.esm_empirical)
    out.append(_check("Fisher quadrature vs entropy route", rep.fisher_gap, 1e-3))
    c = np.array(consts)
    out.append(_check("DSM - ESM independent of score", float((c.max() - c.min()) / np.abs(c).max()), 1e-6))
    return out


def suite_pde():
    out = []
    dom = TorusDomain(1.0, 1)
    grid = GridSpec(256, dom)
    pi = demo_mixture()
    m0 = flow_grid(pi, 0.0, grid)
    path = solve_fokker_planck(FPProblem(DriftField.zero(dom), m0, 0.1, 50))
    out.append(_check("zero-drift FP equals heat flow", float(np.sum(np.abs(path.values[-1] - flow_grid(pi, 0.1, grid).values))
                                                                 * grid.h), 1e-9))
    worst = 0.0
    for k in range(3):
        rng = np.random.default_rng(100 + k)
        b1, b2 = random_trig_drift(rng, dom), random_trig_drift(rng, dom)
        m1, m2 = random_smooth_density(rng, grid), random_smooth_density(rng, grid)
        psi = random_smooth_function(rng, grid)
        worst = max(worst, duality_check(b1, b2, m1, m2, psi, 0.5, 400).relative_residual)
    out.append(_check("backward-equation duality", worst, 1e-3))
    b = random_trig_drift(np.random.default_rng(7), dom, amplitude=2.0)
    p = solve_fokker_planck(FPProblem(b, m0, 0.5, 400))
    mass = np.sum(p.values, axis=1) * grid.h
    out.append(_check("mass conservation", float(np.max(np.abs(mass - 1))), 1e-10))
    return out


def suite_certificates():
    out = []
    pi = demo_mixture()
    fit = cert.contraction_fit(HeatFlowLaw(pi), np.linspace(0.05, 0.3, 6))
    out.append(_check("contraction rate vs slowest heat mode", abs(fit.omega - 4 * math.pi**2) / (4 * math.pi**2), 0.15))
    base = cert.DsmTransferInputs(0.01, 0.5, 0.01, 0.25, 10.0, 0.05)
    lo = cert.dsm_to_esm_transfer(base).total
    hi = cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.01, 0.05, 0.01, 0.25, 10.0, 0.05)).total
    out.append(_check("transfer increases as delta decreases", float(lo >= hi), 0.5))
    zero = cert.dsm_to_esm_transfer(cert.DsmTransferInputs(0.01, 0.5, 0.01, 0.25, 10.0, 0.0)).total
    out.append(_check("transfer with exact sample equals e_nn", abs(zero - 0.01), 0.0))
    inp = cert.WupInputs(0.0, 0.0, 1.0, 1.0, 1.0, cert.Measured(0.0), 0.0)
    c = cert.wup_certificate(inp, lhs_d1=cert.Measured(0.0))["d1-torus"]
    out.append(_check("identical drifts and initials give a consistent certificate", float(c.inconsistent), 0.0))
    return out


def run_suite(name):
    fn = {"identities": suite_identities, "kernels": suite_kernels, "metrics": suite_metrics, "pde": suite_pde,
          "certificates": suite_certificates}[name]
    checks = fn()
    return {"suite": name, "passed": all(c["passed"] for c in checks), "checks": checks,
            "failures": [c["check"] for c in checks if not c["passed"]]}
