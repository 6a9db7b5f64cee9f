"""scikit-learn style wrapper around :func:`rshscp.optimizer.fit`."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidParameter, ShapeMismatch, UnknownSite
from .model import FactorModel, Hyperparams, MultiSiteDataset, check_correlation_matrix
from .optimizer import METHODS, fit, init_lambda


def check_matrices(X, validate=True):
    """Coerce ``X`` to a float ``(N, P, P)`` array of correlation matrices.

    A single ``(P, P)`` matrix is promoted to a batch of one.  With
    ``validate`` every matrix must have unit diagonal, be symmetric and be
    positive definite.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ShapeMismatch(f"expected (N, P, P) matrices, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ShapeMismatch("no matrices given")
    if validate:
        for n in range(X.shape[0]):
            check_correlation_matrix(X[n], name=f"subject {n + 1}")
    return X


class HierarchicalSCP(TransformerMixin, BaseEstimator):
    """Sparse hierarchical factorisation of correlation matrices.

    Parameters
    ----------
    method : {"hscp", "adv_hscp", "rshscp", "adv_rshscp"}
    k : int or tuple of int
        Number of components per level, strictly decreasing.
    tau : float or tuple of float
        L1 bound on each level-1 component.
    alpha, beta, gamma, mu : float
        Attack coupling, clean-data weight, site-adversary weight and the
        L1 bound on the site basis columns.
    max_iters, adv_start_iter : int
    seed : int
    options : dict, optional
        Any further :class:`~rshscp.model.Hyperparams` fields.
    validate : bool
        Check the correlation-matrix invariants of every input.
    transform_iters : int
        Descent steps on the weights of new subjects in :meth:`transform`.

    Attributes
    ----------
    model_ : FactorModel
    components_ : list of ndarray
        ``W_1 ... W_K``.
    weights_ : ndarray
        Training-subject weights, all levels concatenated.
    report_ : FitReport
    site_encoder_ : LabelEncoder
    n_nodes_ : int
    """

    def __init__(self, method="hscp", k=10, tau=10.0, alpha=1000.0, beta=1.0, gamma=0.0,
                 mu=5.0, max_iters=400, adv_start_iter=200, seed=0, options=None,
                 validate=True, transform_iters=100):
        self.method = method
        self.k = k
        self.tau = tau
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.mu = mu
        self.max_iters = max_iters
        self.adv_start_iter = adv_start_iter
        self.seed = seed
        self.options = options
        self.validate = validate
        self.transform_iters = transform_iters

    def _hyperparams(self):
        if self.method not in METHODS:
            raise InvalidParameter(f"method must be one of {METHODS}, got {self.method!r}")
        return Hyperparams.from_dict({
            "k": self.k, "tau": self.tau, "alpha": self.alpha, "beta": self.beta,
            "gamma": self.gamma, "mu": self.mu, "max_iters": self.max_iters,
            "adv_start_iter": min(self.adv_start_iter, self.max_iters), "seed": self.seed,
            **(self.options or {})})

    def _encode_sites(self, y, n, fitting):
        if y is None:
            if fitting:
                self.site_encoder_ = LabelEncoder().fit([0])
                return np.zeros(n, dtype=np.int64)
            return None
        y = np.asarray(y)
        if y.shape != (n,):
            raise ShapeMismatch(f"need one site label per matrix, got shape {y.shape}")
        if fitting:
            self.site_encoder_ = LabelEncoder().fit(y)
        unseen = set(np.unique(y).tolist()) - set(self.site_encoder_.classes_.tolist())
        if unseen:
            raise UnknownSite(f"sites not seen during fit: {sorted(unseen)}")
        return self.site_encoder_.transform(y).astype(np.int64)

    def fit(self, X, y=None):
        """Fit on matrices ``X``; ``y`` holds site labels (one site if omitted)."""
        X = check_matrices(X, self.validate)
        hp = self._hyperparams()
        sites = self._encode_sites(y, X.shape[0], fitting=True)
        data = MultiSiteDataset(X, sites, len(self.site_encoder_.classes_))
        self.report_ = fit(data, hp, self.method)
        self.model_ = self.report_.model
        self.hyperparams_ = hp
        self.components_ = [w.copy() for w in self.model_.W]
        self.weights_ = self.model_.features()
        self.n_nodes_ = X.shape[1]
        return self

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).weights_

    def transform(self, X, sites=None):
        """Subject weights for new matrices with the fitted components held fixed.

        Site terms are removed when the model has them and ``sites`` is given.
        """
        check_is_fitted(self, "model_")
        X = check_matrices(X, self.validate)
        if X.shape[1] != self.n_nodes_:
            raise ShapeMismatch(f"fitted on P={self.n_nodes_}, got P={X.shape[1]}")
        codes = self._encode_sites(sites, X.shape[0], fitting=False)
        use_site = self.model_.has_site_terms and codes is not None
        data = MultiSiteDataset(X, np.zeros(X.shape[0], dtype=np.int64) if codes is None else codes,
                                len(self.site_encoder_.classes_))
        W = [w.copy() for w in self.model_.W]
        Y = FactorModel(W, []).Y()
        lam = init_lambda(data, Y, self.hyperparams_.lambda_projection)
        model = FactorModel(W, lam)
        method = "hscp"
        if use_site:
            model.U = [u.copy() for u in self.model_.U]
            model.V = [v.copy() for v in self.model_.V]
            method = "rshscp"
        if self.transform_iters > 0:
            hp = self.hyperparams_.replace(
                gamma=0.0, max_iters=self.transform_iters,
                adv_start_iter=min(self.hyperparams_.adv_start_iter, self.transform_iters))
            model = fit(data, hp, method, init_model=model, freeze=("W", "U", "V")).model
        return model.features()

    def reconstruct(self, weights=None):
        """``Y_r diag(lambda) Y_r^T`` at the deepest level for each weight row."""
        check_is_fitted(self, "model_")
        w = self.weights_ if weights is None else np.asarray(weights, dtype=float)
        k = self.model_.widths
        lam = w[:, sum(k[:-1]):]
        y = self.model_.Y()[-1]
        return np.einsum("pk,nk,qk->npq", y, lam, y)
