"""Synthetic multi-site correlation data with known components.

One level::

    Theta^n = (W1 + E_l^n) Lambda^n (W1 + E_r^n)^T + U^s V

Two levels::

    Theta^n = (W1 + E_1^n)(W2 + E_2^n) Lambda^n (W2 + E_2^n)^T (W1 + E_1^n)^T + U^s V

Each assembled matrix is symmetrised, shifted to be positive definite
(``spd_repair``) and rescaled to unit diagonal.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .exceptions import InvalidParameter
from .model import GroundTruth, MultiSiteDataset
from .numerics import (
    make_rng,
    sample_normal,
    sample_wishart,
    spd_repair,
    unit_diagonal_rescale,
)


@dataclass
class SimSpec:
    p: int = 50
    widths: tuple = (10,)
    subjects_per_site: tuple = (200, 300, 400, 500)
    w_density: float = 0.6
    w2_density: float = 0.4
    lambda_mean: float = 4.0
    lambda_sd: float = 1.0
    noise_sd: float = 0.1
    u_mean: float = 1.0
    u_sd: float = 0.1
    v_scale: float = 1.0
    site_to_signal: float = None
    wishart_df: int = None
    spd_eps: float = 1e-3
    rescale: bool = True
    lambda_on_simplex: bool = False
    multiplicative_l1_noise: bool = False
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(k) for k in np.atleast_1d(self.widths))
        self.subjects_per_site = tuple(int(n) for n in np.atleast_1d(self.subjects_per_site))
        self.check()

    @property
    def n_sites(self):
        return len(self.subjects_per_site)

    def check(self):
        if not 0 < self.w_density <= 1 or not 0 < self.w2_density <= 1:
            raise InvalidParameter("densities must lie in (0, 1]")
        if not self.subjects_per_site or min(self.subjects_per_site) < 1:
            raise InvalidParameter("every site needs at least one subject")
        if any(b >= a for a, b in zip(self.widths, self.widths[1:])):
            raise InvalidParameter("widths must be strictly decreasing")
        if self.widths[0] >= self.p:
            raise InvalidParameter("k1 must be smaller than p")
        if min(self.noise_sd, self.u_sd, self.lambda_sd) < 0:
            raise InvalidParameter("standard deviations must be >= 0")
        if self.v_scale < 0 or (self.site_to_signal is not None and self.site_to_signal < 0):
            raise InvalidParameter("site-effect scales must be >= 0")
        if self.wishart_df is not None and self.wishart_df < self.p:
            raise InvalidParameter("wishart_df must be >= p")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["subjects_per_site"] = list(self.subjects_per_site)
        return d


def _sparse_components(rng, rows, cols, density, nonneg=False):
    mask = rng.random((rows, cols)) < density
    # every component touches at least one node
    for j in np.flatnonzero(~mask.any(axis=0)):
        mask[rng.integers(rows), j] = True
    vals = rng.standard_normal((rows, cols))
    if nonneg:
        vals = np.abs(vals)
    return np.where(mask, vals, 0.0)


def _site_factors(rng, spec):
    u = spec.u_mean + spec.u_sd * rng.standard_normal((spec.n_sites, spec.p))
    v = sample_wishart(rng, spec.p, spec.wishart_df or spec.p)
    return u, v / np.linalg.norm(v, 2)


def _assemble(signal, u_s, v, spec):
    site = u_s[:, None] * v
    theta = signal + site
    theta = 0.5 * (theta + theta.T)
    theta = spd_repair(theta, spec.spd_eps)
    if spec.rescale:
        theta = unit_diagonal_rescale(theta)
    return theta


def _site_scale(spec, y, lam):
    """Spectral norm of ``V``: ``v_scale``, or ``site_to_signal`` times the mean clean signal's."""
    if spec.site_to_signal is None:
        return spec.v_scale
    signal = (y * lam.mean(axis=0)) @ y.T
    return spec.site_to_signal * float(np.linalg.norm(signal, 2))


def _sites_vector(spec):
    return np.repeat(np.arange(spec.n_sites), spec.subjects_per_site)


def _draw_lambda(rng, spec, n, k):
    lam = np.abs(spec.lambda_mean + spec.lambda_sd * rng.standard_normal((n, k)))
    if spec.lambda_on_simplex:
        lam /= lam.sum(axis=1, keepdims=True)
    return lam


def generate_one_level(spec):
    """Dataset and ground truth from the one-level generative model."""
    spec.check()
    if len(spec.widths) != 1:
        raise InvalidParameter("generate_one_level needs exactly one width")
    rng = make_rng(spec.seed)
    k = spec.widths[0]
    w1 = _sparse_components(rng, spec.p, k, spec.w_density)
    w1 /= np.abs(w1).max(axis=0, keepdims=True)
    u, v = _site_factors(rng, spec)
    sites = _sites_vector(spec)
    lam = _draw_lambda(rng, spec, sites.size, k)
    v = v * _site_scale(spec, w1, lam)
    mats = np.empty((sites.size, spec.p, spec.p))
    for n, s in enumerate(sites):
        e_l = sample_normal(rng, 0.0, spec.noise_sd, spec.p, k)
        e_r = sample_normal(rng, 0.0, spec.noise_sd, spec.p, k)
        signal = (w1 + e_l) @ np.diag(lam[n]) @ (w1 + e_r).T
        mats[n] = _assemble(signal, u[s], v, spec)
    data = MultiSiteDataset(mats, sites, spec.n_sites,
                            metadata={"sim": spec.to_dict(),
                                      "wishart_df": spec.wishart_df or spec.p})
    return data, GroundTruth([w1], [lam], u, v)


def generate_two_level(spec):
    """Dataset and ground truth from the two-level generative model."""
    spec.check()
    if len(spec.widths) != 2:
        raise InvalidParameter("generate_two_level needs exactly two widths")
    rng = make_rng(spec.seed)
    k1, k2 = spec.widths
    w1 = _sparse_components(rng, spec.p, k1, spec.w_density)
    w1 /= np.abs(w1).max(axis=0, keepdims=True)
    w2 = _sparse_components(rng, k1, k2, spec.w2_density, nonneg=True)
    u, v = _site_factors(rng, spec)
    sites = _sites_vector(spec)
    lam = _draw_lambda(rng, spec, sites.size, k2)
    v = v * _site_scale(spec, w1 @ w2, lam)
    mats = np.empty((sites.size, spec.p, spec.p))
    for n, s in enumerate(sites):
        e1 = sample_normal(rng, 0.0, spec.noise_sd, spec.p, k1)
        e2 = sample_normal(rng, 0.0, spec.noise_sd, k1, k2)
        a = w1 @ e1[:k1, :] if spec.multiplicative_l1_noise else w1 + e1
        y = a @ (w2 + e2)
        signal = y @ np.diag(lam[n]) @ y.T
        mats[n] = _assemble(signal, u[s], v, spec)
    data = MultiSiteDataset(mats, sites, spec.n_sites,
                            metadata={"sim": spec.to_dict(),
                                      "wishart_df": spec.wishart_df or spec.p})
    return data, GroundTruth([w1, w2], [lam], u, v)


def generate(spec):
    return generate_one_level(spec) if len(spec.widths) == 1 else generate_two_level(spec)


def attach_covariate(dataset, rule, truth=None):
    """Populate ``dataset.covariates`` with ``rule(n, site, lambda_row)``.

    ``lambda_row`` is the subject's ground-truth weight vector when ``truth``
    is given, else ``None``.  Returns the same dataset.
    """
    lam = None if truth is None else truth.Lambda[-1]
    cov = np.array([float(rule(n, int(dataset.sites[n]), None if lam is None else lam[n]))
                    for n in range(dataset.n_subjects)])
    dataset.covariates = cov
    return dataset
