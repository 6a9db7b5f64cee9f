"""Euclidean projections used by the alternating minimisation.

All functions accept a 1-D vector; the ``*_columns`` helpers apply them to
every column of a matrix.
"""

import numpy as np

from .exceptions import InvalidParameter

_BISECT_TOL = 1e-10
_BISECT_MAX = 200
_FEAS_RTOL = 1e-12


def proj_nonneg(a):
    """Closest elementwise-nonnegative array: ``max(0, a)``."""
    return np.maximum(np.asarray(a, dtype=float), 0.0)


def proj_l1(v, mu):
    """Project ``v`` onto the L1 ball of radius ``mu`` (sort and soft-threshold)."""
    if not mu > 0:
        raise InvalidParameter(f"mu must be > 0, got {mu}")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    if a.sum() <= mu:
        return v.copy()
    u = np.sort(a)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u * idx > css - mu)[0][-1]
    theta = (css[rho] - mu) / (rho + 1.0)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def proj_trace_simplex(d):
    """Project ``d`` onto ``{x >= 0, sum(x) = 1}``."""
    d = np.asarray(d, dtype=float)
    u = np.sort(d)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, u.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(d - theta, 0.0)


def proj_l1_linf(v, tau):
    """Project ``v`` onto ``{x : ||x||_1 <= tau, ||x||_inf <= 1}``.

    The solution has the form ``clip(sign(v) * max(|v| - theta, 0), -1, 1)``
    for the smallest ``theta >= 0`` that makes it L1-feasible; ``theta`` is
    found by bisection on the (monotone, continuous) L1 norm of that map.
    """
    if not tau > 0:
        raise InvalidParameter(f"tau must be > 0, got {tau}")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    clipped = np.minimum(a, 1.0)
    # points on the boundary may overshoot tau by rounding; treat them as feasible
    if clipped.sum() <= tau * (1.0 + _FEAS_RTOL):
        return np.sign(v) * clipped

    def l1(theta):
        return np.minimum(np.maximum(a - theta, 0.0), 1.0).sum()

    lo, hi = 0.0, float(a.max())
    for _ in range(_BISECT_MAX):
        mid = 0.5 * (lo + hi)
        if l1(mid) > tau:
            lo = mid
        else:
            hi = mid
        if hi - lo <= _BISECT_TOL * max(1.0, hi):
            break
    x = np.minimum(np.maximum(a - hi, 0.0), 1.0)
    # the map is piecewise linear in theta; finish exactly on the piece at hi
    active = (a - hi > 0) & (a - hi < 1)
    n_active = int(active.sum())
    if n_active:
        theta = (np.sum(a[active]) + np.sum(a - hi >= 1) - tau) / n_active
        width = hi - lo
        if lo - width <= theta <= hi + width:
            x = np.minimum(np.maximum(a - theta, 0.0), 1.0)
    return np.sign(v) * x


def _columnwise(fn, m, radius):
    m = np.asarray(m, dtype=float)
    out = np.empty_like(m)
    for j in range(m.shape[1]):
        out[:, j] = fn(m[:, j], radius)
    return out


def proj_l1_linf_columns(w, tau):
    return _columnwise(proj_l1_linf, w, tau)


def proj_l1_columns(v, mu):
    """Column-wise L1-ball projection, vectorised over columns."""
    if not mu > 0:
        raise InvalidParameter(f"mu must be > 0, got {mu}")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    norms = a.sum(axis=0)
    out = v.copy()
    over = norms > mu
    if not np.any(over):
        return out
    ao = a[:, over]
    u = -np.sort(-ao, axis=0)
    css = np.cumsum(u, axis=0)
    idx = np.arange(1, u.shape[0] + 1)[:, None]
    cond = u * idx > css - mu
    rho = cond.shape[0] - 1 - np.argmax(cond[::-1], axis=0)
    cols = np.arange(u.shape[1])
    theta = (css[rho, cols] - mu) / (rho + 1.0)
    out[:, over] = np.sign(v[:, over]) * np.maximum(ao - theta[None, :], 0.0)
    return out


def proj_trace_simplex_rows(d):
    """Row-wise simplex projection of an ``(n, k)`` array."""
    d = np.asarray(d, dtype=float)
    u = -np.sort(-d, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    idx = np.arange(1, d.shape[1] + 1)[None, :]
    cond = u - css / idx > 0
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    rows = np.arange(d.shape[0])
    theta = css[rows, rho] / (rho + 1.0)
    return np.maximum(d - theta[:, None], 0.0)


def renormalize_trace_rows(d):
    """Nonneg clip then divide each row by its sum; zero rows become uniform."""
    d = proj_nonneg(d)
    s = d.sum(axis=1, keepdims=True)
    out = np.where(s > 0, d / np.where(s > 0, s, 1.0), 1.0 / d.shape[1])
    return out
