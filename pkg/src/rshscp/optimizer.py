"""Initialisation and the alternating AMSGrad fitting loop.

Four methods share one driver:

========== ============ ===========================
method     site terms   adversarial twin / classifier
========== ============ ===========================
hscp       no           no / no
adv_hscp   no           yes / no
rshscp     yes          no / yes (when gamma > 0)
adv_rshscp yes          yes / yes (when gamma > 0)
========== ============ ===========================
"""

import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .amsgrad import AmsgradGroup, AmsgradState, amsgrad_step  # noqa: F401
from .classifier import SiteClassifier
from .exceptions import InvalidMethodConfig, InvalidParameter, NonFiniteLoss
from .model import FactorModel
from .numerics import spawn_rngs, sym_eig
from .objective import (
    GradWorkspace,
    objective_and_error,
    grad_attack_W,
    grad_J_Lambda,
    grad_J_U,
    grad_J_V,
    grad_J_W,
    perturb,
)
from .projections import (
    proj_l1_columns,
    proj_l1_linf_columns,
    proj_nonneg,
    proj_trace_simplex_rows,
    renormalize_trace_rows,
)

METHODS = ("hscp", "adv_hscp", "rshscp", "adv_rshscp")


def _method_flags(method):
    if method not in METHODS:
        raise InvalidMethodConfig(f"unknown method {method!r}; choose from {METHODS}")
    return {"site": method in ("rshscp", "adv_rshscp"),
            "adversarial": method in ("adv_hscp", "adv_rshscp")}


def project_lambda(lam, how="nonneg"):
    lam = proj_nonneg(lam)
    if how == "nonneg":
        return lam
    if how == "simplex":
        return proj_trace_simplex_rows(lam)
    return renormalize_trace_rows(lam)


def project_W(w, r, tau):
    """Level-1 components go to the L1/Linf ball, deeper levels are clipped at 0."""
    return proj_l1_linf_columns(w, tau[0]) if r == 0 else proj_nonneg(w)


def init_lambda(data, Y, how="nonneg"):
    """Per-subject least-squares weights for fixed components, then projected.

    Solves ``((Y^T Y) * (Y^T Y)) lambda = diag(Y^T Theta Y)`` (Hadamard
    square), which minimises ``||Theta - Y diag(lambda) Y^T||_F`` when the
    Gram matrix is invertible.
    """
    lam = []
    for y in Y:
        d = np.sum(y[None] * np.matmul(data.matrices, y), axis=1)
        gram = y.T @ y
        h = gram * gram
        sol = np.linalg.lstsq(h, d.T, rcond=None)[0].T
        lam.append(project_lambda(sol, how))
    return lam


def svd_init(data, widths, tau, lambda_projection="nonneg"):
    """Spectral initialisation of the components and subject weights.

    ``W_1`` holds the top-``k_1`` eigenvectors of the mean matrix, each
    scaled to unit max-abs and projected onto the L1/Linf ball.  Deeper
    levels take the top eigenvectors of ``Y_{r-1}^T M Y_{r-1}``, sign-fixed
    to a positive sum and clipped at zero.
    """
    widths = tuple(int(k) for k in widths)
    tau = tuple(np.broadcast_to(np.asarray(tau, dtype=float), (len(widths),)))
    if widths[0] > data.p:
        raise InvalidParameter(f"k1={widths[0]} exceeds P={data.p}")
    if any(b >= a for a, b in zip(widths, widths[1:])):
        raise InvalidParameter("widths must be strictly decreasing")
    mean = data.matrices.mean(axis=0)
    mean = 0.5 * (mean + mean.T)
    vecs = sym_eig(mean).eigenvectors[:, :widths[0]]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(vecs.shape[1])])
    w1 = vecs / np.abs(vecs).max(axis=0, keepdims=True)
    W = [proj_l1_linf_columns(w1, tau[0])]
    y = W[0]
    for k in widths[1:]:
        m = y.T @ mean @ y
        e = sym_eig(0.5 * (m + m.T)).eigenvectors[:, :k]
        e = e * np.where(e.sum(axis=0) < 0, -1.0, 1.0)
        wr = proj_nonneg(e)
        # a column that clips to zero restarts from its absolute value
        dead = ~np.any(wr > 0, axis=0)
        wr[:, dead] = np.abs(e[:, dead])
        W.append(wr)
        y = y @ wr
    Y = []
    acc = None
    for w in W:
        acc = w if acc is None else acc @ w
        Y.append(acc)
    return W, init_lambda(data, Y, lambda_projection)


def random_init(data, widths, tau, rng, lambda_projection="nonneg"):
    W = [proj_l1_linf_columns(rng.uniform(-1, 1, (data.p, widths[0])), tau[0])]
    for a, b in zip(widths[:-1], widths[1:]):
        W.append(rng.uniform(0, 1, (a, b)))
    lam = [project_lambda(rng.uniform(0, 1, (data.n_subjects, k)), lambda_projection)
           for k in widths]
    return W, lam


def site_init(data, model, mu=None):
    """Site factors from the per-site mean residual; ``V_r = J / P``.

    ``U_r^s`` is the diagonal of (mean residual of site ``s``) times ``J``,
    i.e. the row sums of that mean residual.  ``V_r`` is projected column-wise
    onto the ``mu`` L1 ball when ``mu`` is given.
    """
    ws = GradWorkspace(model, data, use_site=False)
    U, V = [], []
    p = data.p
    for r in range(model.depth):
        z = ws.Z[r]
        u = np.zeros((data.n_sites, p))
        for s in range(data.n_sites):
            members = data.site_members(s)
            if members.size:
                u[s] = z[members].mean(axis=0).sum(axis=1)
        v = np.full((p, p), 1.0 / p)
        if mu is not None:
            v = proj_l1_columns(v, mu)
        U.append(u)
        V.append(v)
    return U, V


@dataclass
class FitReport:
    model: FactorModel
    method: str
    hyperparams: dict
    seed: int
    recon_trace: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)
    phase_trace: list = field(default_factory=list)
    adv_start: int = None
    n_iter: int = 0
    converged: bool = False
    wall_clock: float = 0.0
    sigma: float = None
    classifier: object = None
    extras: dict = field(default_factory=dict)

    def summary(self):
        return {
            "method": self.method,
            "seed": self.seed,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "adv_start": self.adv_start,
            "final_reconstruction_error": self.recon_trace[-1] if self.recon_trace else None,
            "final_objective": self.objective_trace[-1] if self.objective_trace else None,
            "sigma": self.sigma,
            "wall_clock": self.wall_clock,
            "hyperparams": self.hyperparams,
        }


def _thread_limit(deterministic):
    if not deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


class _Fitter:
    def __init__(self, data, hp, method, init_model=None, freeze=(), fixed_V=None,
                 init="svd", callback=None):
        self.data = data
        self.hp = hp
        self.method = method
        self.flags = _method_flags(method)
        if hp.gamma > 0 and not self.flags["site"]:
            raise InvalidMethodConfig(f"gamma > 0 requires a site-aware method, got {method}")
        if len(hp.k) < 1 or hp.k[0] >= data.p:
            raise InvalidMethodConfig(f"k1={hp.k[0]} must be < P={data.p}")
        self.freeze = set(freeze)
        if fixed_V is not None:
            self.freeze.add("V")
        self.callback = callback
        rng_init, rng_clf = spawn_rngs(hp.seed, 2)
        self.fresh_init = init_model is None
        if init_model is not None:
            self.model = init_model.copy()
        else:
            if init == "svd":
                W, lam = svd_init(data, hp.k, hp.tau, hp.lambda_projection)
            elif init == "random":
                W, lam = random_init(data, hp.k, hp.tau, rng_init, hp.lambda_projection)
            else:
                raise InvalidParameter(f"unknown init {init!r}")
            self.model = FactorModel(W, lam)
            if self.flags["site"]:
                self.model.U, self.model.V = site_init(data, self.model, hp.mu)
        if self.flags["site"] and fixed_V is not None:
            self.model.V = [np.array(v, dtype=float, copy=True) for v in fixed_V]
        if not self.flags["site"]:
            self.model.U = self.model.V = None
        self.opt = AmsgradGroup(hp.beta1, hp.beta2, hp.eps_opt)
        self.attack_opt = AmsgradGroup(hp.beta1, hp.beta2, hp.eps_opt)
        self.classifier = None
        if self.flags["site"] and hp.gamma > 0:
            self.classifier = SiteClassifier(
                sum(hp.k), data.n_sites, hidden=hp.classifier_hidden,
                dropout=hp.dropout, seed=rng_clf, lr=hp.lr_classifier,
                beta1=hp.beta1, beta2=hp.beta2, eps=hp.eps_opt)
            self.classifier.set_input_stats(self.model.features())
        self.perturbed = None
        self.adv_active = False
        self._x_cache = None

    # -- individual updates -------------------------------------------------
    def _ws(self):
        m = self.model
        if not self.flags["site"]:
            return GradWorkspace(m, self.data)
        key = tuple(m.U) + tuple(m.V)
        cached = self._x_cache
        if cached is None or len(cached[0]) != len(key) or any(
                a is not b for a, b in zip(cached[0], key)):
            X = GradWorkspace(m, self.data).X
            self._x_cache = cached = (key, X)
        return GradWorkspace(m, self.data, X=cached[1])

    def _update_W(self, r):
        if "W" in self.freeze:
            return
        m, hp = self.model, self.hp
        g = grad_J_W(m, self.data, r, hp.beta, ws=self._ws())
        m.W[r] = project_W(self.opt.step(("W", r), m.W[r], g, hp.lr_w), r, hp.tau)

    def _update_Lambda(self, r):
        if "Lambda" in self.freeze:
            return
        m, hp = self.model, self.hp
        fg = None
        if self.classifier is not None:
            _, fg = self.classifier.backward(m.features(), self.data.one_hot)
        g = grad_J_Lambda(m, self.data, self.classifier, None, r, hp.beta, hp.gamma,
                          hp.adversary_sign, ws=self._ws(), feature_grad=fg)
        lam = self.opt.step(("Lambda", r), m.Lambda[r], g, hp.lr_lambda)
        m.Lambda[r] = project_lambda(lam, hp.lambda_projection)

    def _update_site(self):
        m, hp = self.model, self.hp
        for r in range(m.depth):
            if "U" not in self.freeze:
                g = grad_J_U(m, self.data, None, r, hp.beta, ws=self._ws())
                m.U[r] = self.opt.step(("U", r), m.U[r], g, hp.lr_u)
            if "V" not in self.freeze:
                g = grad_J_V(m, self.data, r, hp.beta, ws=self._ws())
                v = self.opt.step(("V", r), m.V[r], g, hp.lr_v)
                m.V[r] = proj_l1_columns(v, hp.mu)

    def sweep(self):
        m = self.model
        for r in range(m.depth):
            if self.adv_active:
                self.attack_step_level(r)
            if self.hp.defense_order == "prose":
                self._update_Lambda(r)
                self._update_W(r)
            else:
                self._update_W(r)
                self._update_Lambda(r)
        if self.flags["site"]:
            self._update_site()
        self._train_classifier()

    def _train_classifier(self):
        m = self.model
        if self.classifier is not None:
            feats = m.features()
            self.classifier.set_input_stats(feats)
            for _ in range(self.hp.classifier_steps):
                self.classifier.train_step(feats, self.data.one_hot)

    def attack_step_level(self, r):
        _attack_level(self.model, self.perturbed.data, r, self.hp, self.attack_opt)

    def start_adversarial(self):
        self.model.W_tilde = [w.copy() for w in self.model.W]
        if self.perturbed is None:
            self.perturbed = perturb(self.data)
        self.adv_active = True

    def objective(self):
        hp = self.hp
        return objective_and_error(self.model, self.data, self.classifier, hp.gamma,
                                   hp.beta, hp.adversary_sign, ws=self._ws())

    # -- driver ---------------------------------------------------------------
    def run(self):
        hp = self.hp
        t0 = time.perf_counter()
        report = FitReport(self.model, self.method, hp.to_dict(), hp.seed,
                           classifier=self.classifier)
        with _thread_limit(hp.deterministic):
            if self.flags["adversarial"]:
                self.perturbed = perturb(self.data)
                report.sigma = self.perturbed.sigma
            obj, rec = self.objective()
            report.objective_trace.append(obj)
            report.recon_trace.append(rec)
            report.phase_trace.append("pre")
            prev = obj
            warmup = hp.site_warmup_iters if self.flags["site"] and self.fresh_init else 0
            for it in range(1, hp.max_iters + 1):
                in_warmup = it <= warmup
                if in_warmup:
                    self._update_site()
                    self._train_classifier()
                else:
                    self.sweep()
                obj, rec = self.objective()
                if not (np.isfinite(obj) and np.isfinite(rec)):
                    raise NonFiniteLoss(f"objective diverged at iteration {it}",
                                        last_finite_iteration=it - 1)
                phase = "adv" if self.adv_active else ("warmup" if in_warmup else "pre")
                report.objective_trace.append(obj)
                report.recon_trace.append(rec)
                report.phase_trace.append(phase)
                report.n_iter = it
                if self.callback is not None:
                    self.callback(it, phase, obj, rec)
                rel = abs(obj - prev) / max(abs(prev), 1e-300)
                prev = obj
                if in_warmup:
                    continue
                if self.flags["adversarial"] and not self.adv_active:
                    if it >= hp.adv_start_iter or rel < 10 * hp.stop_tol:
                        report.adv_start = it
                        self.start_adversarial()
                        prev = self.objective()[0]
                    continue
                if self.adv_active and it - report.adv_start < hp.min_adv_iters:
                    continue
                if rel < hp.stop_tol:
                    report.converged = True
                    break
        report.wall_clock = time.perf_counter() - t0
        return report


def fit(data, hp, method="hscp", init_model=None, freeze=(), fixed_V=None, init="svd",
        callback=None):
    """Fit one of the four factorisation methods.

    Parameters
    ----------
    data : MultiSiteDataset
    hp : Hyperparams
    method : {"hscp", "adv_hscp", "rshscp", "adv_rshscp"}
    init_model : FactorModel, optional
        Start from this model instead of the spectral initialisation.
    freeze : iterable of str
        Any of ``"W"``, ``"Lambda"``, ``"U"``, ``"V"`` to hold fixed.
    fixed_V : list of ndarray, optional
        Use and freeze these ``V_r`` (leave-one-site-out fits).
    init : {"svd", "random"}
    callback : callable, optional
        Called as ``callback(iteration, phase, objective, reconstruction_error)``.

    Returns
    -------
    FitReport
    """
    return _Fitter(data, hp, method, init_model, freeze, fixed_V, init, callback).run()


def attack_step(model, perturbed, hp, state=None):
    """Run ``hp.attack_steps`` attack updates on every ``W_tilde_r`` in place.

    Each update is an AMSGrad step on ``H(W_tilde, Lambda, Gamma)`` followed
    by the closed-form proximal step for ``alpha ||W_tilde_r - W_r||^2``, so
    large ``alpha`` pins the twin to ``W`` instead of making the step stiff.

    ``state`` is an :class:`AmsgradGroup` carried between calls; a fresh one
    is made when omitted.  Returns the updated twin list.
    """
    state = state or AmsgradGroup(hp.beta1, hp.beta2, hp.eps_opt)
    pdata = getattr(perturbed, "data", perturbed)
    for r in range(model.depth):
        _attack_level(model, pdata, r, hp, state)
    return model.W_tilde


def _attack_level(model, pdata, r, hp, state):
    # AMSGrad on the perturbed-data term, then the exact proximal map of
    # alpha ||W_tilde - W||^2 with step lr_attack, then the feasible-set projection
    c = 2.0 * hp.alpha * hp.lr_attack
    for _ in range(hp.attack_steps):
        g = grad_attack_W(model, pdata, r, 0.0)
        w = state.step(("Wt", r), model.W_tilde[r], g, hp.lr_attack)
        w = (w + c * model.W[r]) / (1.0 + c)
        model.W_tilde[r] = project_W(w, r, hp.tau)
