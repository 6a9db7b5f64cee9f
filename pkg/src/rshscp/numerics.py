"""Dense symmetric linear algebra and seeded random sampling.

Everything here operates on plain ``numpy.ndarray`` objects (float64).
Random streams are ``numpy.random.Generator`` instances built on PCG64,
so a seed fully determines every draw.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import (
    InvalidParameter,
    NoConvergence,
    NonPositiveDiagonal,
    NotSymmetric,
)

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class SymEigResult:
    """Eigenvalues sorted in descending order and matching eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def make_rng(seed):
    """Return a PCG64 generator; an existing generator is passed through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed, n):
    """Independent per-worker streams derived from ``(seed, worker index)``."""
    return [np.random.Generator(np.random.PCG64(s))
            for s in np.random.SeedSequence(seed).spawn(n)]


def _check_symmetric(a, tol=SYMMETRY_TOL):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotSymmetric("matrix has non-finite entries")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > tol:
        raise NotSymmetric(f"max |a - a^T| = {asym:.3e} exceeds {tol:.0e}")
    return a


def _jacobi_eig(a, max_sweeps=100, tol=1e-15):
    # cyclic Jacobi with the classical stable rotation formulas
    a = a.copy()
    n = a.shape[0]
    q = np.eye(n)
    scale = max(np.max(np.abs(a)), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            return np.diag(a).copy(), q
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= 1e-300:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                ar = a[:, r].copy()
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap = a[p, :].copy()
                ar = a[r, :].copy()
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                qp = q[:, p].copy()
                qr = q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
    raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")


def sym_eig(a, method="lapack"):
    """Eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    a : array_like, shape (p, p)
        Symmetric within 1e-12.
    method : {"lapack", "jacobi"}
        ``"lapack"`` calls ``numpy.linalg.eigh``; ``"jacobi"`` runs the
        cyclic Jacobi sweep implemented here (slow, kept as a reference).

    Returns
    -------
    SymEigResult
        Eigenvalues in descending order with orthonormal eigenvectors.
    """
    a = _check_symmetric(a)
    sym = 0.5 * (a + a.T)
    if method == "lapack":
        try:
            w, q = np.linalg.eigh(sym)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence(str(exc)) from exc
    elif method == "jacobi":
        w, q = _jacobi_eig(sym)
    else:
        raise InvalidParameter(f"unknown eigensolver {method!r}")
    order = np.argsort(-w, kind="stable")
    return SymEigResult(w[order], q[:, order])


def min_eigenvalue(a):
    return float(np.linalg.eigvalsh(0.5 * (a + a.T))[0])


def sample_normal(rng, mean, sd, rows, cols):
    """``rows x cols`` matrix of iid N(mean, sd^2) draws."""
    if sd < 0:
        raise InvalidParameter(f"sd must be >= 0, got {sd}")
    return mean + sd * rng.standard_normal((rows, cols))


def sample_wishart(rng, p, df=None):
    """One Wishart(I_p, df) draw, computed as A A^T with A ~ N(0,1)^{p x df}."""
    df = p if df is None else df
    if df < p:
        raise InvalidParameter(f"df must be >= p ({p}), got {df}")
    a = rng.standard_normal((p, df))
    w = a @ a.T
    return 0.5 * (w + w.T)


def spd_repair(a, eps):
    """Shift ``a`` by ``c I`` with ``c = max(0, eps - lambda_min(a))``."""
    a = _check_symmetric(a)
    c = max(0.0, eps - sym_eig(a).eigenvalues[-1])
    if c == 0.0:
        return a.copy()
    return a + c * np.eye(a.shape[0])


def unit_diagonal_rescale(a):
    """Correlation normalisation ``D^{-1/2} a D^{-1/2}`` with ``D = diag(a)``.

    The result is symmetrised so that it is exactly symmetric and the
    diagonal is set to exactly one.
    """
    a = np.asarray(a, dtype=float)
    d = np.diag(a)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise NonPositiveDiagonal("all diagonal entries must be > 0")
    s = 1.0 / np.sqrt(d)
    out = a * s[:, None] * s[None, :]
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out
