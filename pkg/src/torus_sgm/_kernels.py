"""Hot loops: periodic heat-kernel mixtures and the Euler-Maruyama step.

Each kernel has a numba implementation and a chunked numpy implementation
with identical semantics. ``mixture_eval`` and ``em_step`` dispatch on the
``TORUS_SGM_DISABLE_JIT`` flag (see ``_jit``); the explicit ``*_numba`` and
``*_numpy`` entry points are public for benchmarking and cross-checks.

One-dimensional kernel of the generator d^2/dx^2 on a circle of length R:

    image sum   G(t, x) = sum_k exp(-(x + kR)^2 / (4t)) / sqrt(4 pi t)
    Fourier     G(t, x) = (1/R) [1 + 2 sum_n exp(-w_n^2 t) cos(w_n x)],  w_n = 2 pi n / R

The image sum is used below the crossover time and the Fourier series above.
Truncations adapt to t so that omitted terms are below exp(-40) relative.
"""

import math

import numpy as np

from ._jit import JIT_ENABLED, njit

_LOG_4PI = math.log(4.0 * math.pi)
_TAIL = 40.0


@njit(cache=True)
def _n_images(t, R, K):
    k = 1 + int(math.ceil(math.sqrt(4.0 * _TAIL * t) / R))
    return min(K, k)


@njit(cache=True)
def _n_modes(t, R, M):
    m = int(math.ceil(R * math.sqrt(_TAIL / t) / (2.0 * math.pi))) + 1
    return min(M, m)


@njit(cache=True)
def _axis_terms(x, t, R, K, M, tstar):
    """Return (log G, G'/G, G''/G) for one axis; x is any real."""
    x = x - R * math.floor(x / R + 0.5)
    if t < tstar:
        kk = _n_images(t, R, K)
        inv = 1.0 / (4.0 * t)
        # k = 0 carries the largest exponent because |x| <= R/2
        e0 = -x * x * inv
        s = 0.0
        a1 = 0.0
        a2 = 0.0
        for k in range(-kk, kk + 1):
            y = x + k * R
            w = math.exp(-y * y * inv - e0)
            s += w
            a1 += w * (-y / (2.0 * t))
            a2 += w * (y * y / (4.0 * t * t) - 1.0 / (2.0 * t))
        return e0 + math.log(s) - 0.5 * (_LOG_4PI + math.log(t)), a1 / s, a2 / s
    mm = _n_modes(t, R, M)
    g0 = 1.0
    g1 = 0.0
    g2 = 0.0
    for n in range(1, mm + 1):
        w = 2.0 * math.pi * n / R
        q = 2.0 * math.exp(-w * w * t)
        c = math.cos(w * x)
        g0 += q * c
        g1 -= q * w * math.sin(w * x)
        g2 -= q * w * w * c
    return math.log(g0) - math.log(R), g1 / g0, g2 / g0


@njit(cache=True)
def mixture_eval_numba(x, means, times, logw, R, K, M, tstar, order):
    P, d = x.shape
    C = means.shape[0]
    logp = np.empty(P)
    s1 = np.zeros((P, d))
    s2 = np.zeros((P if order >= 2 else 1, d, d))
    g1 = np.empty(d)
    g2 = np.empty(d)
    v1 = np.empty(d)
    v2 = np.empty((d, d))
    for p in range(P):
        mx = -np.inf
        S = 0.0
        v1[:] = 0.0
        v2[:, :] = 0.0
        for c in range(C):
            lc = logw[c]
            for a in range(d):
                lg, b1, b2 = _axis_terms(x[p, a] - means[c, a], times[c], R, K, M, tstar)
                lc += lg
                g1[a] = b1
                g2[a] = b2
            if lc == -np.inf:
                continue
            if lc > mx:
                sc = math.exp(mx - lc) if mx > -np.inf else 0.0
                S *= sc
                for a in range(d):
                    v1[a] *= sc
                    for b in range(d):
                        v2[a, b] *= sc
                mx = lc
            w = math.exp(lc - mx)
            S += w
            for a in range(d):
                v1[a] += w * g1[a]
            if order >= 2:
                for a in range(d):
                    for b in range(d):
                        if a == b:
                            v2[a, b] += w * g2[a]
                        else:
                            v2[a, b] += w * g1[a] * g1[b]
        logp[p] = mx + math.log(S)
        for a in range(d):
            s1[p, a] = v1[a] / S
            if order >= 2:
                for b in range(d):
                    s2[p, a, b] = v2[a, b] / S
    return logp, s1, s2


def _axis_terms_numpy(dx, t, R, K, M, tstar):
    """Vectorised ``_axis_terms``: dx has shape (P, C), t has shape (C,)."""
    dx = dx - R * np.floor(dx / R + 0.5)
    lg = np.empty(dx.shape)
    g1 = np.empty(dx.shape)
    g2 = np.empty(dx.shape)
    small = t < tstar
    if small.any():
        tt = t[small]
        kk = max(_n_images(float(tt.max()), R, K), 1)
        k = np.arange(-kk, kk + 1) * R
        y = dx[:, small, None] + k
        tt3 = tt[:, None]
        e = -y * y / (4.0 * tt3)
        e0 = e[..., kk]
        w = np.exp(e - e0[..., None])
        s = w.sum(-1)
        lg[:, small] = e0 + np.log(s) - 0.5 * (_LOG_4PI + np.log(tt))
        g1[:, small] = (w * (-y / (2.0 * tt3))).sum(-1) / s
        g2[:, small] = (w * (y * y / (4.0 * tt3 * tt3) - 1.0 / (2.0 * tt3))).sum(-1) / s
    large = ~small
    if large.any():
        tt = t[large]
        mm = _n_modes(float(tt.min()), R, M)
        w = 2.0 * np.pi * np.arange(1, mm + 1) / R
        q = 2.0 * np.exp(-np.outer(tt, w * w))
        ph = dx[:, large, None] * w
        c = np.cos(ph)
        g0 = 1.0 + (q * c).sum(-1)
        lg[:, large] = np.log(g0) - math.log(R)
        g1[:, large] = -(q * w * np.sin(ph)).sum(-1) / g0
        g2[:, large] = -(q * w * w * c).sum(-1) / g0
    return lg, g1, g2


def mixture_eval_numpy(x, means, times, logw, R, K, M, tstar, order, chunk=4096):
    P, d = x.shape
    logp = np.empty(P)
    s1 = np.zeros((P, d))
    s2 = np.zeros((P if order >= 2 else 1, d, d))
    for lo in range(0, P, chunk):
        hi = min(P, lo + chunk)
        l = np.broadcast_to(logw, (hi - lo, logw.size)).copy()
        g1 = []
        g2 = []
        for a in range(d):
            lg, b1, b2 = _axis_terms_numpy(x[lo:hi, a, None] - means[None, :, a], times, R, K, M, tstar)
            l += lg
            g1.append(b1)
            g2.append(b2)
        mx = l.max(axis=1, keepdims=True)
        r = np.exp(l - mx)
        S = r.sum(axis=1, keepdims=True)
        logp[lo:hi] = mx[:, 0] + np.log(S[:, 0])
        r /= S
        for a in range(d):
            s1[lo:hi, a] = (r * g1[a]).sum(1)
            if order >= 2:
                for b in range(d):
                    m = g2[a] if a == b else g1[a] * g1[b]
                    s2[lo:hi, a, b] = (r * m).sum(1)
    return logp, s1, s2


def mixture_eval(x, means, times, logw, R, K, M, tstar, order=1, use_jit=None):
    """Log-density and normalised derivatives of a periodic kernel mixture.

    Returns ``(log eta, grad eta / eta, hess eta / eta)`` at the points ``x``.
    The Hessian block is only filled when ``order >= 2``.
    """
    x = np.ascontiguousarray(x, dtype=float)
    means = np.ascontiguousarray(means, dtype=float)
    times = np.ascontiguousarray(times, dtype=float)
    logw = np.ascontiguousarray(logw, dtype=float)
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    fn = mixture_eval_numba if use_jit else mixture_eval_numpy
    return fn(x, means, times, logw, float(R), int(K), int(M), float(tstar), int(order))


@njit(cache=True)
def em_step_numba(x, drift, dt, u, R):
    P, d = x.shape
    scale = math.sqrt(2.0 * dt)
    for p in range(P):
        for a in range(d):
            j = p * d + a
            u1 = u[2 * (j // 2)]
            u2 = u[2 * (j // 2) + 1]
            r = math.sqrt(-2.0 * math.log(1.0 - u1))
            if j % 2 == 0:
                z = r * math.cos(2.0 * math.pi * u2)
            else:
                z = r * math.sin(2.0 * math.pi * u2)
            y = x[p, a] + drift[p, a] * dt + scale * z
            y -= R * math.floor(y / R)
            if y >= R:
                y = 0.0
            x[p, a] = y


def box_muller(u, count):
    """Standard normals from uniform pairs; normal j uses pair j // 2."""
    r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    ang = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * r.size)
    z[0::2] = r * np.cos(ang)
    z[1::2] = r * np.sin(ang)
    return z[:count]


def em_step_numpy(x, drift, dt, u, R):
    P, d = x.shape
    z = box_muller(u, P * d).reshape(P, d)
    y = x + drift * dt + math.sqrt(2.0 * dt) * z
    y -= R * np.floor(y / R)
    y[y >= R] = 0.0
    x[...] = y


def em_step(x, drift, dt, u, R, use_jit=None):
    """In-place wrapped Euler-Maruyama step with diffusion sqrt(2)."""
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    fn = em_step_numba if use_jit else em_step_numpy
    fn(x, np.ascontiguousarray(drift, dtype=float), float(dt), u, float(R))


@njit(cache=True)
def kernel_score_numba(dx, t, R, K, M, tstar):
    B, d = dx.shape
    out = np.empty((B, d))
    for i in range(B):
        for a in range(d):
            _, g1, _ = _axis_terms(dx[i, a], t[i], R, K, M, tstar)
            out[i, a] = g1
    return out


def kernel_score_numpy(dx, t, R, K, M, tstar):
    B, d = dx.shape
    out = np.empty((B, d))
    for a in range(d):
        _, g1, _ = _axis_terms_numpy(dx[None, :, a], t, R, K, M, tstar)
        out[:, a] = g1[0]
    return out


def kernel_score(dx, t, R, K, M, tstar, use_jit=None):
    """Score of the heat kernel at displacement ``dx[i]`` and time ``t[i]``."""
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    fn = kernel_score_numba if use_jit else kernel_score_numpy
    return fn(np.ascontiguousarray(dx, dtype=float), np.ascontiguousarray(t, dtype=float), float(R), int(K), int(M), float(tstar))
