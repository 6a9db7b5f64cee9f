"""Objective values and analytic gradients.

Notation used throughout: for level ``r`` the cumulative product is
``Y_r = W_1 ... W_r``; the site-removed data is ``X_r^n = Theta^n - U_r^s V_r``
and the level residual is ``R_r^n = X_r^n - Y_r diag(lambda_r^n) Y_r^T``.

The model player minimises

    J = a * G(W_tilde) + b * G(W) + sign * gamma * CE(classifier, Lambda)

with ``(a, b) = (1, beta)`` once the adversarial twin exists and
``(a, b) = (0, 1)`` before.  ``sign`` defaults to -1 so that the subject
weights are pushed to *increase* the classifier's cross-entropy.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .exceptions import MissingAdversary, NotSPD, ShapeMismatch, UnknownSite
from .model import MultiSiteDataset, check_correlation_matrix
from .numerics import unit_diagonal_rescale
from .exceptions import InvariantViolation


def _cumprod(ws):
    out, acc = [], None
    for w in ws:
        acc = w if acc is None else acc @ w
        out.append(acc)
    return out


def _outer_flat(y):
    # row i is vec(y_i y_i^T), shape (k, P*P)
    return (y.T[:, :, None] * y.T[:, None, :]).reshape(y.shape[1], -1)


def _recon(y, lam):
    # y: (P, k), lam: (N, k) -> (N, P, P)
    p = y.shape[0]
    return (lam @ _outer_flat(y)).reshape(lam.shape[0], p, p)


def _check_shapes(model, data):
    if model.p != data.p:
        raise ShapeMismatch(f"model has P={model.p}, data has P={data.p}")
    for r, lam in enumerate(model.Lambda):
        if lam.shape != (data.n_subjects, model.widths[r]):
            raise ShapeMismatch(
                f"Lambda level {r + 1} has shape {lam.shape}, expected "
                f"({data.n_subjects}, {model.widths[r]})")
    if model.U is not None:
        for u in model.U:
            if u.shape[0] < data.n_sites:
                raise UnknownSite(f"model has {u.shape[0]} sites, data uses {data.n_sites}")


def site_term(model, data, r):
    """``U_r^{s(n)} V_r`` stacked over subjects, or ``None`` without site terms."""
    if not model.has_site_terms:
        return None
    u = model.U[r][data.sites]
    return u[:, :, None] * model.V[r][None, :, :]


class GradWorkspace:
    """Cached intermediate products for one (model, data) state.

    Build a fresh workspace whenever any variable changes.
    """

    def __init__(self, model, data, use_site=True, X=None):
        _check_shapes(model, data)
        self.model = model
        self.data = data
        self.use_site = use_site and model.has_site_terms
        if X is not None:
            # caller-supplied site-removed data for the current U, V
            self.X = X

    @cached_property
    def Y(self):
        return _cumprod(self.model.W)

    @cached_property
    def Y_tilde(self):
        if self.model.W_tilde is None:
            return None
        return _cumprod(self.model.W_tilde)

    @cached_property
    def X(self):
        out = []
        for r in range(self.model.depth):
            st = site_term(self.model, self.data, r) if self.use_site else None
            out.append(self.data.matrices if st is None else self.data.matrices - st)
        return out

    def residual(self, r, tilde=False):
        return self._R_tilde[r] if tilde else self._R[r]

    @cached_property
    def _R(self):
        return [self.X[r] - _recon(self.Y[r], self.model.Lambda[r])
                for r in range(self.model.depth)]

    @cached_property
    def _R_tilde(self):
        if self.Y_tilde is None:
            raise MissingAdversary("model has no adversarial twin")
        return [self.X[r] - _recon(self.Y_tilde[r], self.model.Lambda[r])
                for r in range(self.model.depth)]

    @cached_property
    def Z(self):
        """Data minus the subject-component reconstruction, per level."""
        return [self.data.matrices - _recon(self.Y[r], self.model.Lambda[r])
                for r in range(self.model.depth)]


def _weights(model, beta):
    return (0.0, 1.0) if model.W_tilde is None else (1.0, float(beta))


def eval_H(model, data):
    """Sum over subjects and levels of the squared Frobenius residual, no site terms."""
    ws = GradWorkspace(model, data, use_site=False)
    return float(sum(np.sum(ws.residual(r) ** 2) for r in range(model.depth)))


def eval_G(model, data, tilde=False):
    """Like :func:`eval_H` with each level's site term removed from the data."""
    ws = GradWorkspace(model, data)
    return float(sum(np.sum(ws.residual(r, tilde) ** 2) for r in range(model.depth)))


def classifier_loss(classifier, model, data):
    if classifier is None:
        return 0.0
    pred = classifier.predict_proba(model.features())
    return classifier.cross_entropy(pred, data.one_hot)


def eval_J(model, data, classifier=None, gamma=0.0, beta=1.0, adversary_sign=-1.0):
    """Model-player objective ``G(W_tilde) + beta G(W) + sign * gamma * CE``."""
    if model.W_tilde is None:
        raise MissingAdversary("eval_J needs the adversarial twin W_tilde")
    ce = classifier_loss(classifier, model, data) if gamma else 0.0
    return (eval_G(model, data, tilde=True) + beta * eval_G(model, data)
            + adversary_sign * gamma * ce)


def eval_objective(model, data, classifier=None, gamma=0.0, beta=1.0,
                   adversary_sign=-1.0):
    """:func:`eval_J` when the twin exists, else ``G(W) + sign * gamma * CE``."""
    if model.W_tilde is not None:
        return eval_J(model, data, classifier, gamma, beta, adversary_sign)
    ce = classifier_loss(classifier, model, data) if gamma else 0.0
    return eval_G(model, data) + adversary_sign * gamma * ce


def reconstruction_error(model, data):
    """Relative residual energy including site terms (the convergence metric)."""
    ws = GradWorkspace(model, data)
    num = sum(np.sum(ws.residual(r) ** 2) for r in range(model.depth))
    den = model.depth * np.sum(data.matrices ** 2)
    return float(num / den)


def objective_and_error(model, data, classifier=None, gamma=0.0, beta=1.0,
                        adversary_sign=-1.0, ws=None):
    """``(eval_objective(...), reconstruction_error(...))`` from one workspace."""
    ws = ws or GradWorkspace(model, data)
    g = float(sum(np.sum(ws.residual(r) ** 2) for r in range(model.depth)))
    rec = g / (model.depth * np.sum(data.matrices ** 2))
    ce = classifier_loss(classifier, model, data) if gamma else 0.0
    obj = beta * g if model.W_tilde is not None else g
    if model.W_tilde is not None:
        obj += float(sum(np.sum(ws.residual(r, True) ** 2) for r in range(model.depth)))
    return obj + adversary_sign * gamma * ce, float(rec)


@dataclass
class PerturbedDataset:
    data: MultiSiteDataset
    sigma: float


def offdiag_sd(data):
    iu = np.triu_indices(data.p, 1)
    return float(np.std(data.matrices[:, iu[0], iu[1]]))


def perturb(data, rng=None, sigma=None):
    """Rank-one inflation ``Theta + sigma J`` rescaled back to unit diagonal.

    ``sigma`` defaults to the standard deviation of all pooled off-diagonal
    entries.  ``rng`` is accepted for interface symmetry; the perturbation is
    deterministic.
    """
    if sigma is None:
        sigma = offdiag_sd(data)
    out = np.empty_like(data.matrices)
    for n in range(data.n_subjects):
        g = unit_diagonal_rescale(data.matrices[n] + sigma)
        try:
            check_correlation_matrix(g, name=f"perturbed subject {n}")
        except InvariantViolation as exc:
            raise NotSPD(str(exc)) from exc
        out[n] = g
    pdata = MultiSiteDataset(out, data.sites.copy(), data.n_sites, data.covariates,
                             dict(data.metadata))
    return PerturbedDataset(pdata, float(sigma))


def _grad_W_generic(ws_list, y_list, lam, residuals, r, symmetric):
    """Gradient of sum_j>=r ||R_j||^2 w.r.t. W_r for the factor list ``ws_list``."""
    p = y_list[0].shape[0]
    y_prev = np.eye(p) if r == 0 else y_list[r - 1]
    grad = np.zeros_like(ws_list[r])
    b = np.eye(ws_list[r].shape[1])
    for j in range(r, len(ws_list)):
        if j > r:
            b = b @ ws_list[j]
        res = residuals[j]
        k = lam[j].shape[1]
        # A_i = sum_n lambda_ni R_n, one GEMM over flattened residuals
        a = (lam[j].T @ res.reshape(res.shape[0], -1)).reshape(k, p, p)
        sym = 2.0 * a if symmetric else a + np.swapaxes(a, 1, 2)
        # d||R||^2 / dy_i = -2 (A_i + A_i^T) y_i
        dy = -2.0 * np.matmul(sym, y_list[j].T[:, :, None])[:, :, 0].T
        grad += y_prev.T @ dy @ b.T
    return grad


def _diag_quad(y, res):
    # diag(Y^T R_n Y) = <R_n, y_i y_i^T> for every subject n
    return res.reshape(res.shape[0], -1) @ _outer_flat(y).T


def grad_J_W(model, data, r, beta=1.0, ws=None):
    """Gradient of ``b * G(W)`` with respect to ``W_r`` (0-based level)."""
    ws = ws or GradWorkspace(model, data)
    _, b = _weights(model, beta)
    res = [ws.residual(j) for j in range(model.depth)]
    g = _grad_W_generic(model.W, ws.Y, model.Lambda, res, r,
                        symmetric=not ws.use_site)
    return b * g


def grad_attack_W(model, perturbed, r, alpha, ws=None):
    """Gradient of ``alpha ||W_tilde_r - W_r||^2 + H(W_tilde, Lambda, Gamma)``."""
    if model.W_tilde is None:
        raise MissingAdversary("attack gradient needs W_tilde")
    pdata = perturbed.data if isinstance(perturbed, PerturbedDataset) else perturbed
    ws = ws or GradWorkspace(model, pdata, use_site=False)
    res = ws._R_tilde
    g = _grad_W_generic(model.W_tilde, ws.Y_tilde, model.Lambda, res, r, symmetric=True)
    return 2.0 * alpha * (model.W_tilde[r] - model.W[r]) + g


def grad_J_Lambda(model, data, classifier=None, n=None, r=0, beta=1.0, gamma=0.0,
                  adversary_sign=-1.0, ws=None, feature_grad=None):
    """Gradient with respect to the level-``r`` subject weights.

    Returns the ``(N, k_r)`` array for all subjects when ``n`` is ``None``,
    otherwise the length-``k_r`` row for subject ``n``.  ``feature_grad``
    may carry a precomputed classifier input gradient.
    """
    ws = ws or GradWorkspace(model, data)
    a, b = _weights(model, beta)
    grad = b * -2.0 * _diag_quad(ws.Y[r], ws.residual(r))
    if a:
        grad += a * -2.0 * _diag_quad(ws.Y_tilde[r], ws.residual(r, True))
    if gamma and classifier is not None:
        if feature_grad is None:
            _, feature_grad = classifier.backward(model.features(), data.one_hot,
                                                  train_mode=False)
        start = sum(model.widths[:r])
        grad += adversary_sign * gamma * feature_grad[:, start:start + model.widths[r]]
    return grad if n is None else grad[n]


def _site_residuals(model, ws, r, beta):
    a, b = _weights(model, beta)
    out = [(b, ws.residual(r))]
    if a:
        out.append((a, ws.residual(r, True)))
    return out


def grad_J_U(model, data, s=None, r=0, beta=1.0, ws=None):
    """Gradient with respect to the diagonal ``U_r^s``; all sites if ``s`` is None."""
    if not model.has_site_terms:
        raise UnknownSite("model has no site terms")
    if s is not None and not 0 <= s < model.U[r].shape[0]:
        raise UnknownSite(f"site {s} not in model")
    ws = ws or GradWorkspace(model, data)
    v = model.V[r]
    grad = np.zeros_like(model.U[r])
    for coef, res in _site_residuals(model, ws, r, beta):
        per_subject = -2.0 * np.einsum("npq,pq->np", res, v)
        np.add.at(grad, data.sites, coef * per_subject)
    return grad if s is None else grad[s]


def grad_J_V(model, data, r=0, beta=1.0, ws=None):
    """Gradient with respect to ``V_r``."""
    if not model.has_site_terms:
        raise UnknownSite("model has no site terms")
    ws = ws or GradWorkspace(model, data)
    u = model.U[r][data.sites]
    grad = np.zeros_like(model.V[r])
    for coef, res in _site_residuals(model, ws, r, beta):
        grad += coef * -2.0 * np.einsum("np,npq->pq", u, res)
    return grad
