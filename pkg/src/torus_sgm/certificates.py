"""Constant-free right-hand sides of the error bounds, paired with measurements.

Every certificate stores the measured left-hand side (with the certified error
of the transport method used), each bracketed term of the bound without the
unknown universal constant, the assembled constant-free right-hand side, and
the fitted constant lhs / rhs. Scaling checks then look at how the fitted
constant behaves across a sweep.
"""

from dataclasses import dataclass, field, asdict
import math

import numpy as np
from scipy import stats

from .errors import InsufficientDataError, InvalidInputError
from .metrics import w1_circle, w1_grid
from .objectives import time_quadrature
from .torus import GridDensity, GridSpec

FOUR_PI_SQ = 4.0 * math.pi**2


@dataclass(frozen=True)
class Measured:
    """A measured distance with its certified additive error and method."""

    value: float
    bound: float = 0.0
    method: str = "exact"

    @classmethod
    def from_transport(cls, res):
        return cls(res.distance, res.bound, res.method)


@dataclass(frozen=True)
class WupInputs:
    eps1: float
    eps2: float
    grad_b1_sup: float
    T: float
    R: float
    init_d1: Measured
    init_l1: float
    grad_b1_uncertainty: float = 0.0

    def __post_init__(self):
        for name in ("eps1", "eps2", "grad_b1_sup", "T", "R", "init_l1"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and nonnegative, got {v}")
        if self.T <= 0 or self.R <= 0:
            raise InvalidInputError("T and R must be positive")


@dataclass
class BoundCertificate:
    bound: str
    lhs: float
    lhs_bound: float
    rhs_terms: dict
    rhs: float
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(v < 0 for v in self.rhs_terms.values()):
            raise InvalidInputError("right-hand-side terms must be nonnegative")

    @property
    def fitted_constant(self):
        if self.rhs > 0:
            return self.lhs / self.rhs
        return 0.0 if self.lhs <= self.lhs_bound else math.inf

    @property
    def inconsistent(self):
        """Zero right-hand side with a left-hand side above its error bar."""
        return self.rhs == 0 and self.lhs > self.lhs_bound

    @property
    def dominant_term(self):
        return max(self.rhs_terms, key=self.rhs_terms.get) if self.rhs_terms else None

    def to_dict(self):
        d = asdict(self)
        d["fitted_constant"] = self.fitted_constant
        d["inconsistent"] = self.inconsistent
        return d


def _field_at(f, t, x):
    return f.evaluate(t, x) if hasattr(f, "evaluate") else f(t, x)


def drift_l2_error(f1, f2, weight, mode="space-time", window=None, grid_n=None, n_time=32, reverse=False):
    """Weighted L2 distance between two vector fields.

    ``weight`` is either a heat-flow law (fields evaluated at the flow time
    over ``window``) or a density path ``SpaceTimeField`` (fields evaluated at
    the path time, or at ``T - t`` when ``reverse`` is set). ``mode`` is
    ``"sup-in-time"`` for sup_t ||f2 - f1||_{L2(w(t))} or ``"space-time"``
    for the L2 norm over time and space.
    """
    if mode not in ("sup-in-time", "space-time"):
        raise InvalidInputError(f"unknown mode {mode}")
    if hasattr(weight, "values") and hasattr(weight, "times"):
        grid = weight.grid
        x = grid.nodes()
        T = weight.horizon
        slices = []
        for i, t in enumerate(weight.times):
            tt = T - t if reverse else t
            diff = _field_at(f2, tt, x) - _field_at(f1, tt, x)
            w = weight.values[i].ravel()
            slices.append(float(np.sum(np.sum(diff**2, axis=1) * w) / np.sum(w)))
        slices = np.array(slices)
        if mode == "sup-in-time":
            return math.sqrt(max(float(slices.max()), 0.0))
        from scipy.integrate import simpson

        return math.sqrt(max(float(simpson(slices, x=weight.times)), 0.0))
    if window is None:
        raise InvalidInputError("a heat-flow weight needs an explicit window")
    lo, hi = window
    grid = GridSpec(grid_n or (256 if weight.domain.dim == 1 else 64), weight.domain)
    x = grid.nodes()
    cv = grid.cell_volume

    def slice_val(s):
        diff = _field_at(f2, s, x) - _field_at(f1, s, x)
        return float(np.sum(np.sum(diff**2, axis=1) * weight.density(s, x)) * cv)

    if mode == "sup-in-time":
        ts = np.linspace(lo, hi, 65)
        if lo == 0 and not weight.has_density_at(0.0):
            ts = ts[1:]
        return math.sqrt(max(slice_val(s) for s in ts))
    nodes, w = time_quadrature(lo, hi, n_time)
    return math.sqrt(max(sum(wi * slice_val(s) for s, wi in zip(nodes, w)), 0.0))


def wup_certificate(inputs, lhs_d1=None, lhs_l1=None):
    """The three propagation bounds for given drift errors and initial distances.

    Returns a dict with keys ``l1-d1``, ``l1-l1`` (need ``lhs_l1``, the measured
    L1 distance of the terminal densities) and ``d1-torus`` (needs ``lhs_d1``).
    """
    T, R, g = inputs.T, inputs.R, inputs.grad_b1_sup
    pre_tv = math.sqrt(T * g) + 1.0
    pre_d1 = R**1.5 * (1.0 + math.sqrt(g))
    d1_0 = inputs.init_d1.value + inputs.init_d1.bound
    prov = {"eps1": inputs.eps1, "eps2": inputs.eps2, "grad_b1_sup": g, "grad_b1_uncertainty": inputs.grad_b1_uncertainty,
            "init_d1": asdict(inputs.init_d1), "init_l1": inputs.init_l1, "T": T, "R": R}
    out = {}
    if lhs_l1 is not None:
        lv, lb = (lhs_l1.value, lhs_l1.bound) if isinstance(lhs_l1, Measured) else (float(lhs_l1), 0.0)
        terms = {"initial": pre_tv * d1_0 / math.sqrt(T), "drift": pre_tv * math.sqrt(T) * inputs.eps1}
        out["l1-d1"] = BoundCertificate("wup-l1-d1", lv, lb, terms, sum(terms.values()), prov)
        terms = {"initial": pre_tv * inputs.init_l1, "drift": pre_tv * math.sqrt(T) * inputs.eps1}
        out["l1-l1"] = BoundCertificate("wup-l1-l1", lv, lb, terms, sum(terms.values()), prov)
    if lhs_d1 is not None:
        m = lhs_d1 if isinstance(lhs_d1, Measured) else Measured(float(lhs_d1))
        terms = {"initial": pre_d1 * d1_0, "drift": pre_d1 * inputs.eps2}
        out["d1-torus"] = BoundCertificate("wup-d1-torus", m.value, m.bound, terms, sum(terms.values()), prov)
    return out


def reference_term(R, omega, T, d1_ref):
    return R * math.exp(-omega * T / R**2) * d1_ref


def esm_certificate(lhs, e_nn, grad_s_sup, d1_ref, T, R, omega, e_nn_sup=None, lhs_l1=None, provenance=None):
    """Both displayed ESM bounds: d1 form, and the L1 form when a sup-in-time error is given."""
    lv, lb = (lhs.value, lhs.bound) if isinstance(lhs, Measured) else (float(lhs), 0.0)
    pre = R**1.5 * (1.0 + math.sqrt(grad_s_sup))
    ref = d1_ref.value + d1_ref.bound if isinstance(d1_ref, Measured) else float(d1_ref)
    terms = {"reference": pre * reference_term(R, omega, T, ref), "score": pre * math.sqrt(max(e_nn, 0.0))}
    prov = dict(provenance or {}, e_nn=e_nn, grad_s_sup=grad_s_sup, d1_ref=ref, T=T, R=R, omega=omega)
    out = {"d1": BoundCertificate("esm-d1", lv, lb, terms, sum(terms.values()), prov)}
    if e_nn_sup is not None and lhs_l1 is not None:
        pre_tv = math.sqrt(T * grad_s_sup) + 1.0
        terms = {"reference": pre_tv * R**2 * math.exp(-omega * T / R**2) / math.sqrt(T) * ref,
                 "score": pre_tv * math.sqrt(T * max(e_nn_sup, 0.0))}
        out["l1"] = BoundCertificate("esm-l1", float(lhs_l1), 0.0, terms, sum(terms.values()), dict(prov, e_nn_sup=e_nn_sup))
    return out


@dataclass(frozen=True)
class DsmTransferInputs:
    e_nn: float
    delta: float
    epsilon: float
    T: float
    c2_norm: float
    d1_sample: float

    def __post_init__(self):
        if not (self.delta > 0 and self.epsilon > 0 and self.T > 0):
            raise InvalidInputError("delta, epsilon and T must be positive")
        if self.e_nn < 0 or self.c2_norm < 0 or self.d1_sample < 0:
            raise InvalidInputError("e_nn, c2_norm and d1_sample must be nonnegative")


@dataclass(frozen=True)
class TransferBreakdown:
    e_nn: float
    factor_terms: dict
    d1_sample: float
    sample_term: float
    total: float

    @property
    def dominant(self):
        parts = {"e_nn": self.e_nn}
        parts.update({k: v * self.d1_sample for k, v in self.factor_terms.items()})
        return max(parts, key=parts.get)

    def to_dict(self):
        d = asdict(self)
        d["dominant"] = self.dominant
        return d


def dsm_to_esm_transfer(inp):
    """e'_nn = e_nn + (1 + |log delta|/sqrt(eps) + 1/sqrt(T) + T c2^2) d1_sample, constant-free."""
    terms = {
        "one": 1.0,
        "log_delta": abs(math.log(inp.delta)) / math.sqrt(inp.epsilon),
        "inv_sqrt_T": 1.0 / math.sqrt(inp.T),
        "T_c2_sq": inp.T * inp.c2_norm**2,
    }
    sample_term = sum(terms.values()) * inp.d1_sample
    return TransferBreakdown(inp.e_nn, terms, inp.d1_sample, sample_term, inp.e_nn + sample_term)


def dsm_pointwise_certificate(lhs, epsilon, grad_s_sup, d1_ref, T, R, omega, transfer, provenance=None):
    """sqrt(eps) + R^{3/2}(1 + sqrt|grad s|)(R e^{-omega T/R^2} d1(pi, U) + sqrt(e'_nn))."""
    lv, lb = (lhs.value, lhs.bound) if isinstance(lhs, Measured) else (float(lhs), 0.0)
    pre = R**1.5 * (1.0 + math.sqrt(grad_s_sup))
    ref = d1_ref.value + d1_ref.bound if isinstance(d1_ref, Measured) else float(d1_ref)
    terms = {
        "early_stopping": math.sqrt(epsilon),
        "reference": pre * reference_term(R, omega, T, ref),
        "score": pre * math.sqrt(transfer.e_nn),
        "sample": pre * (math.sqrt(transfer.total) - math.sqrt(transfer.e_nn)),
    }
    prov = dict(provenance or {}, epsilon=epsilon, grad_s_sup=grad_s_sup, d1_ref=ref, T=T, R=R, omega=omega,
                transfer=transfer.to_dict())
    return BoundCertificate("dsm-pointwise", lv, lb, terms, sum(terms.values()), prov)


@dataclass(frozen=True)
class ContractionFit:
    omega: float
    omega_ci: tuple
    slope: float
    times: np.ndarray
    d1: np.ndarray
    R: float

    @property
    def omega_lower(self):
        return self.omega_ci[0]

    def to_dict(self):
        return {"omega": self.omega, "omega_ci": list(self.omega_ci), "omega_over_R2": self.omega / self.R**2,
                "slope": self.slope, "times": self.times.tolist(), "d1": self.d1.tolist(), "R": self.R}


def contraction_fit(flow, times, grid_n=512, floor=1e-13, level=0.95):
    """Fit log d1(eta(t), uniform) = a - (omega / R^2) t by least squares.

    Points with d1 below ``floor`` carry no information and are dropped; at
    least four must remain. The confidence interval uses the t distribution.
    """
    domain = flow.domain
    R = domain.radius
    grid = GridSpec(grid_n, domain)
    uni = GridDensity.uniform(grid)
    times = np.asarray(times, dtype=float)
    d1 = []
    for t in times:
        m = flow.grid_density(t, grid)
        d1.append(w1_circle(m, uni).distance if domain.dim == 1 else w1_grid(m, uni).distance)
    d1 = np.array(d1)
    use = d1 > floor
    if use.sum() < 4:
        raise InsufficientDataError(f"only {int(use.sum())} usable distances (need 4)")
    res = stats.linregress(times[use], np.log(d1[use]))
    k = int(use.sum()) - 2
    half = stats.t.ppf(0.5 + level / 2, k) * res.stderr if k > 0 else math.inf
    omega = -res.slope * R**2
    ci = (omega - half * R**2, omega + half * R**2)
    return ContractionFit(omega, ci, res.slope, times, d1, R)


def expectation_error_bound(lipschitz, certificate, which="both"):
    """|E_pi h - E_mg h| <= Lip(h) * d1; returns the measured and certified forms."""
    if lipschitz < 0:
        raise InvalidInputError("Lipschitz constant must be nonnegative")
    out = {"measured": lipschitz * (certificate.lhs + certificate.lhs_bound),
           "certified": lipschitz * certificate.fitted_constant * certificate.rhs if certificate.rhs > 0 else lipschitz * certificate.lhs}
    if which == "both":
        return out
    return out[which]


def loglog_slope(x, y):
    """Least-squares slope of log y against log x with its standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    res = stats.linregress(np.log(x), np.log(y))
    return float(res.slope), float(res.stderr)
