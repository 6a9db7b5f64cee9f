"""Two-step baseline: hSCP, location-scale harmonisation of the weights, refit.

The harmoniser is the additive/multiplicative core of ComBat without the
empirical-Bayes shrinkage.  After harmonising the subject weights ``Delta``
a shared diagonal shift ``S`` (keeping every ``Delta^n + S >= 1e-6``) is
fitted jointly with ``W`` so that ``Theta^n ~ Y (Delta^n + S) Y^T``.
"""

import time
from dataclasses import dataclass

import numpy as np

from .amsgrad import AmsgradGroup
from .exceptions import DegenerateSite, NonFiniteLoss, ShapeMismatch
from .objective import GradWorkspace, grad_J_Lambda, grad_J_W, objective_and_error
from .optimizer import FitReport, _thread_limit, fit, project_W

SPD_FLOOR = 1e-6


@dataclass
class HarmonizationParams:
    """Per-site location/scale and the pooled reference, all ``(S, d)`` or ``(d,)``."""

    site_mean: np.ndarray
    site_sd: np.ndarray
    scale: np.ndarray
    pooled_mean: np.ndarray
    pooled_sd: np.ndarray

    def apply(self, features, sites):
        x = np.asarray(features, dtype=float)
        s = np.asarray(sites)
        mean = self.site_mean[s]
        return (x - mean) * self.scale[s] + self.pooled_mean


def harmonize_features(features, sites, floor=0.0):
    """Match every site's per-feature mean and sd to the pooled ones.

    A feature whose within-site sd is ``<= floor`` only gets the location
    adjustment at that site.  Returns ``(harmonised, HarmonizationParams)``.
    """
    x = np.asarray(features, dtype=float)
    sites = np.asarray(sites)
    if x.ndim != 2 or sites.shape != (x.shape[0],):
        raise ShapeMismatch("features must be (N, d) with one site label per row")
    uniq, idx = np.unique(sites, return_inverse=True)
    counts = np.bincount(idx)
    if counts.min() < 2:
        bad = uniq[counts < 2].tolist()
        raise DegenerateSite(f"sites with fewer than two subjects: {bad}")
    n_sites = int(sites.max()) + 1
    d = x.shape[1]
    site_mean = np.zeros((n_sites, d))
    site_sd = np.ones((n_sites, d))
    for s in uniq:
        xs = x[sites == s]
        site_mean[s] = xs.mean(axis=0)
        site_sd[s] = xs.std(axis=0)
    pooled_mean = x.mean(axis=0)
    pooled_sd = x.std(axis=0)
    scale = np.where(site_sd > floor, pooled_sd / np.where(site_sd > floor, site_sd, 1.0), 1.0)
    # a constant feature keeps its within-site spread (none) rather than scale 0
    scale = np.where(scale > 0, scale, 1.0)
    params = HarmonizationParams(site_mean, site_sd, scale, pooled_mean, pooled_sd)
    return params.apply(x, sites), params


def _shift_floor(delta):
    return SPD_FLOOR - delta.min(axis=0)


def combat_hscp_fit(data, hp, refit_iters=None, callback=None):
    """Fit hSCP, harmonise ``Lambda`` across sites, then refit ``W`` and ``S``.

    ``refit_iters`` defaults to ``hp.max_iters``.  The returned report has
    ``method="combat_hscp"``; its model carries ``Delta + S`` as ``Lambda``
    and ``report.extras`` holds ``delta``, ``shift`` and ``harmonization``.
    """
    t0 = time.perf_counter()
    first = fit(data, hp, "hscp")
    model = first.model.copy()
    delta, params = [], []
    for lam in model.Lambda:
        if data.n_sites > 1:
            h, p = harmonize_features(lam, data.sites)
        else:
            h, p = lam.copy(), None
        delta.append(h)
        params.append(p)
    shift = [np.maximum(0.0, _shift_floor(d)) for d in delta]
    model.Lambda = [d + s for d, s in zip(delta, shift)]

    report = FitReport(model, "combat_hscp", hp.to_dict(), hp.seed)
    report.extras = {"delta": delta, "shift": shift, "harmonization": params,
                     "first_stage": first}
    opt = AmsgradGroup(hp.beta1, hp.beta2, hp.eps_opt)
    iters = hp.max_iters if refit_iters is None else int(refit_iters)
    with _thread_limit(hp.deterministic):
        obj, rec = objective_and_error(model, data)
        report.objective_trace.append(obj)
        report.recon_trace.append(rec)
        report.phase_trace.append("refit")
        prev = obj
        for it in range(1, iters + 1):
            for r in range(model.depth):
                g = grad_J_W(model, data, r, ws=GradWorkspace(model, data))
                model.W[r] = project_W(opt.step(("W", r), model.W[r], g, hp.lr_w), r, hp.tau)
                # dJ/dS = sum over subjects of dJ/dLambda^n at Lambda^n = Delta^n + S
                g_s = grad_J_Lambda(model, data, r=r, ws=GradWorkspace(model, data)).sum(axis=0)
                s = opt.step(("S", r), shift[r], g_s, hp.lr_lambda)
                shift[r] = np.maximum(s, _shift_floor(delta[r]))
                model.Lambda[r] = delta[r] + shift[r]
            obj, rec = objective_and_error(model, data)
            if not (np.isfinite(obj) and np.isfinite(rec)):
                raise NonFiniteLoss(f"refit diverged at iteration {it}",
                                    last_finite_iteration=it - 1)
            report.objective_trace.append(obj)
            report.recon_trace.append(rec)
            report.phase_trace.append("refit")
            report.n_iter = it
            if callback is not None:
                callback(it, "refit", obj, rec)
            rel = abs(obj - prev) / max(abs(prev), 1e-300)
            prev = obj
            if rel < hp.stop_tol:
                report.converged = True
                break
    report.wall_clock = time.perf_counter() - t0
    return report


def shifted_weights(report):
    """``Delta^n + S`` per level from a :func:`combat_hscp_fit` report."""
    return [d + s for d, s in zip(report.extras["delta"], report.extras["shift"])]
