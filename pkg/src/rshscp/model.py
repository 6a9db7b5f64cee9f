"""Datasets, factor models, hyperparameters and feasibility checks."""

from dataclasses import dataclass, field, fields, asdict, replace
from typing import Optional

import numpy as np

from .exceptions import InvalidParameter, InvariantViolation, ShapeMismatch

UNIT_DIAG_TOL = 1e-12
SYM_TOL = 1e-12
SPD_TOL = 1e-10


def check_correlation_matrix(m, name="matrix"):
    """Raise ``InvariantViolation`` unless ``m`` is a valid correlation matrix."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvariantViolation(f"{name}: not square, shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvariantViolation(f"{name}: non-finite entries")
    if np.max(np.abs(np.diag(m) - 1.0)) > UNIT_DIAG_TOL:
        raise InvariantViolation(f"{name}: diagonal is not 1")
    if np.max(np.abs(m - m.T)) > SYM_TOL:
        raise InvariantViolation(f"{name}: not symmetric")
    if np.linalg.eigvalsh(0.5 * (m + m.T))[0] <= SPD_TOL:
        raise InvariantViolation(f"{name}: not positive definite")


@dataclass
class MultiSiteDataset:
    """``N`` correlation matrices with site labels.

    ``sites`` holds 0-based site indices; on disk they are stored 1-based.
    """

    matrices: np.ndarray
    sites: np.ndarray
    n_sites: Optional[int] = None
    covariates: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrices = np.ascontiguousarray(self.matrices, dtype=np.float64)
        self.sites = np.asarray(self.sites, dtype=np.int64)
        if self.matrices.ndim != 3 or self.matrices.shape[1] != self.matrices.shape[2]:
            raise ShapeMismatch(f"matrices must be (N, P, P), got {self.matrices.shape}")
        if self.sites.shape != (self.matrices.shape[0],):
            raise ShapeMismatch("one site label per subject required")
        if self.n_sites is None:
            self.n_sites = int(self.sites.max()) + 1 if self.sites.size else 0
        if self.sites.size and (self.sites.min() < 0 or self.sites.max() >= self.n_sites):
            raise InvariantViolation("site labels out of range")
        if self.covariates is not None:
            self.covariates = np.asarray(self.covariates, dtype=np.float64)

    @property
    def n_subjects(self):
        return self.matrices.shape[0]

    @property
    def p(self):
        return self.matrices.shape[1]

    @property
    def one_hot(self):
        y = np.zeros((self.n_subjects, self.n_sites))
        y[np.arange(self.n_subjects), self.sites] = 1.0
        return y

    def site_members(self, s):
        return np.flatnonzero(self.sites == s)

    def validate(self):
        """Check every matrix and that each site has at least one subject."""
        for n in range(self.n_subjects):
            check_correlation_matrix(self.matrices[n], name=f"subject {n + 1}")
        counts = np.bincount(self.sites, minlength=self.n_sites)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise InvariantViolation(f"sites without subjects: {(empty + 1).tolist()}")

    def subset(self, idx, reindex_sites=False):
        idx = np.asarray(idx)
        sites = self.sites[idx]
        n_sites = self.n_sites
        if reindex_sites:
            uniq, sites = np.unique(sites, return_inverse=True)
            n_sites = uniq.size
        cov = None if self.covariates is None else self.covariates[idx]
        return MultiSiteDataset(self.matrices[idx], sites, n_sites, cov,
                                dict(self.metadata))


@dataclass
class GroundTruth:
    W: list
    Lambda: list
    U: np.ndarray
    V: np.ndarray

    @property
    def Y(self):
        out, acc = [], None
        for w in self.W:
            acc = w if acc is None else acc @ w
            out.append(acc)
        return out


@dataclass
class FactorModel:
    """Shared components, subject weights and site terms.

    Attributes
    ----------
    W : list of ndarray
        ``W[0]`` is ``P x k1``; ``W[r]`` is ``k_r x k_{r+1}``.
    Lambda : list of ndarray
        ``Lambda[r]`` is ``N x k_r`` (diagonals of the subject weights).
    U : list of ndarray or None
        ``U[r]`` is ``S x P`` (diagonals of the per-site factors).
    V : list of ndarray or None
        ``V[r]`` is ``P x P``.
    W_tilde : list of ndarray or None
        Adversarial twin of ``W``.
    """

    W: list
    Lambda: list
    U: Optional[list] = None
    V: Optional[list] = None
    W_tilde: Optional[list] = None

    @property
    def depth(self):
        return len(self.W)

    @property
    def widths(self):
        return tuple(w.shape[1] for w in self.W)

    @property
    def p(self):
        return self.W[0].shape[0]

    @property
    def has_site_terms(self):
        return self.U is not None and self.V is not None

    def Y(self, tilde=False):
        ws = self.W_tilde if tilde else self.W
        out, acc = [], None
        for w in ws:
            acc = w if acc is None else acc @ w
            out.append(acc)
        return out

    def features(self):
        """Concatenated Lambda diagonals, shape ``(N, k1 + ... + kK)``."""
        return np.concatenate(self.Lambda, axis=1)

    def copy(self):
        def cp(xs):
            return None if xs is None else [x.copy() for x in xs]
        return FactorModel(cp(self.W), cp(self.Lambda), cp(self.U), cp(self.V),
                           cp(self.W_tilde))


@dataclass
class Hyperparams:
    """Model and optimiser settings. ``k`` and ``tau`` are per level."""

    k: tuple = (10,)
    tau: tuple = (10.0,)
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.0
    mu: float = 0.5
    lr_w: float = 1e-2
    lr_lambda: float = 1e-3
    lr_u: float = 1e-2
    lr_v: float = 1e-2
    lr_attack: float = 1e-2
    lr_classifier: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    max_iters: int = 400
    adv_start_iter: int = 200
    attack_steps: int = 1
    stop_tol: float = 1e-5
    min_adv_iters: int = 50
    site_warmup_iters: int = 100
    seed: int = 0
    adversary_sign: float = -1.0
    lambda_projection: str = "nonneg"
    defense_order: str = "algorithm"
    classifier_hidden: tuple = (50,)
    dropout: float = 0.2
    classifier_steps: int = 1
    deterministic: bool = True

    def __post_init__(self):
        self.k = tuple(int(x) for x in np.atleast_1d(self.k))
        tau = tuple(float(x) for x in np.atleast_1d(self.tau))
        if len(tau) == 1 and len(self.k) > 1:
            tau = tau * len(self.k)
        self.tau = tau
        self.classifier_hidden = tuple(int(x) for x in np.atleast_1d(self.classifier_hidden))
        self.check()

    def check(self):
        if len(self.k) == 0:
            raise InvalidParameter("at least one level required")
        if any(b >= a for a, b in zip(self.k, self.k[1:])):
            raise InvalidParameter(f"widths must be strictly decreasing, got {self.k}")
        if len(self.tau) != len(self.k):
            raise InvalidParameter("one tau per level required")
        if any(t <= 0 for t in self.tau):
            raise InvalidParameter("tau must be > 0")
        for name in ("alpha", "beta", "gamma", "mu"):
            if getattr(self, name) < 0:
                raise InvalidParameter(f"{name} must be >= 0")
        if self.mu <= 0:
            raise InvalidParameter("mu must be > 0")
        for name in ("lr_w", "lr_lambda", "lr_u", "lr_v", "lr_attack", "lr_classifier"):
            if not getattr(self, name) > 0:
                raise InvalidParameter(f"{name} must be > 0")
        if self.site_warmup_iters < 0:
            raise InvalidParameter("site_warmup_iters must be >= 0")
        if self.adv_start_iter > self.max_iters:
            raise InvalidParameter("adv_start_iter must be <= max_iters")
        if self.lambda_projection not in ("renormalize", "simplex", "nonneg"):
            raise InvalidParameter(f"unknown lambda_projection {self.lambda_projection!r}")
        if self.defense_order not in ("algorithm", "prose"):
            raise InvalidParameter(f"unknown defense_order {self.defense_order!r}")
        if not 0 <= self.dropout < 1:
            raise InvalidParameter("dropout must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidParameter(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw):
        return replace(self, **kw)


def validate(model, hp, tol_l1=1e-9, tol_linf=1e-12, tol_trace=1e-9):
    """List every violated feasibility condition of ``model``.

    An empty list means the model lies in the constraint sets for ``W``,
    ``Lambda`` and ``V``.  The unit-trace condition on ``Lambda`` is checked
    only when ``hp.lambda_projection`` enforces it.
    """
    report = []
    if model.depth != len(hp.k):
        report.append(f"depth {model.depth} != {len(hp.k)} levels in hyperparams")
    for twin, ws in (("W", model.W), ("W_tilde", model.W_tilde)):
        if ws is None:
            continue
        w1 = ws[0]
        l1 = np.abs(w1).sum(axis=0)
        linf = np.abs(w1).max(axis=0)
        for j in np.flatnonzero(l1 > hp.tau[0] + tol_l1):
            report.append(f"{twin}[1] column {j}: L1 norm {l1[j]:.6g} > tau {hp.tau[0]}")
        for j in np.flatnonzero(linf > 1 + tol_linf):
            report.append(f"{twin}[1] column {j}: Linf norm {linf[j]:.6g} > 1")
        for r in range(1, len(ws)):
            neg = np.argwhere(ws[r] < 0)
            for i, j in neg:
                report.append(f"{twin}[{r + 1}] entry ({i}, {j}) negative")
        for r, w in enumerate(ws):
            if not np.all(np.isfinite(w)):
                report.append(f"{twin}[{r + 1}] has non-finite entries")
    for r, lam in enumerate(model.Lambda):
        for n, i in np.argwhere(lam < 0):
            report.append(f"Lambda subject {n} level {r + 1} index {i} negative")
        if hp.lambda_projection == "nonneg":
            continue
        tr = lam.sum(axis=1)
        for n in np.flatnonzero(np.abs(tr - 1) > tol_trace):
            report.append(f"Lambda subject {n} level {r + 1}: trace {tr[n]:.6g} != 1")
    if model.V is not None:
        for r, v in enumerate(model.V):
            l1 = np.abs(v).sum(axis=0)
            for p in np.flatnonzero(l1 > hp.mu + tol_l1):
                report.append(f"V[{r + 1}] column {p}: L1 norm {l1[p]:.6g} > mu {hp.mu}")
    return report
