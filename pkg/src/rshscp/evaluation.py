"""Component accuracy, reproducibility protocols, site prediction and grid search."""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.model_selection import StratifiedKFold
from sklearn.svm import SVC

from .classifier import SiteClassifier
from .exceptions import InvalidParameter, ShapeMismatch, TooFewSubjects, ValidationError
from .model import Hyperparams
from .numerics import make_rng


@dataclass
class MatchResult:
    """Optimal column matching between two component matrices."""

    permutation: dict
    scores: np.ndarray
    mean: float


def abs_cosine_matrix(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"row dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    num = np.abs(a.T @ b)
    den = np.outer(na, nb)
    # columns with zero norm score 0 against everything
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0).clip(0.0, 1.0)


def component_accuracy(estimated, reference):
    """Mean |cosine| over the best one-to-one column assignment."""
    c = abs_cosine_matrix(estimated, reference)
    rows, cols = linear_sum_assignment(c, maximize=True)
    scores = c[rows, cols]
    return MatchResult(dict(zip(rows.tolist(), cols.tolist())), scores,
                       float(scores.mean()) if scores.size else 0.0)


def brute_force_accuracy(estimated, reference):
    """Exhaustive assignment oracle (small widths only)."""
    c = abs_cosine_matrix(estimated, reference)
    k_est, k_ref = c.shape
    if k_est <= k_ref:
        best = max(np.mean([c[i, p[i]] for i in range(k_est)])
                   for p in itertools.permutations(range(k_ref), k_est))
    else:
        best = max(np.mean([c[p[j], j] for j in range(k_ref)])
                   for p in itertools.permutations(range(k_est), k_ref))
    return float(best)


def level_accuracies(model, truth):
    """Accuracy per level, comparing cumulative products ``W_1 ... W_r``."""
    est = model.Y()
    ref = truth.Y
    return [component_accuracy(e, t).mean for e, t in zip(est, ref)]


def model_accuracy(model, truth):
    return float(np.mean(level_accuracies(model, truth)))


def model_similarity(model_a, model_b):
    ya, yb = model_a.Y(), model_b.Y()
    return float(np.mean([component_accuracy(a, b).mean for a, b in zip(ya, yb)]))


def stratified_halves(sites, rng):
    """Random equal split within each site; returns two index arrays."""
    first, second = [], []
    for s in np.unique(sites):
        idx = np.flatnonzero(sites == s)
        idx = idx[rng.permutation(idx.size)]
        half = idx.size // 2
        first.append(idx[:half])
        second.append(idx[half:2 * half] if idx.size % 2 == 0 else idx[half:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def split_sample_reproducibility(data, hp, method, rng=0, repeats=3, fit_fn=None):
    """Similarity of components fitted on two random site-stratified halves.

    Returns ``(mean, sd, scores)``.
    """
    from .optimizer import fit

    fit_fn = fit_fn or (lambda d: fit(d, hp, method).model)
    if data.n_subjects < 4:
        raise TooFewSubjects("split-sample reproducibility needs N >= 4")
    rng = make_rng(rng)
    scores = []
    for _ in range(repeats):
        a, b = stratified_halves(data.sites, rng)
        ma = fit_fn(data.subset(a))
        mb = fit_fn(data.subset(b))
        scores.append(model_similarity(ma, mb))
    scores = np.array(scores)
    return float(scores.mean()), float(scores.std()), scores


def leave_one_site_out(data, hp, method):
    """Per-site similarity between a site-only fit and a fit on the other sites.

    Site-aware single-site fits reuse (and freeze) ``V`` from the complement fit.
    """
    from .optimizer import fit

    if data.n_sites < 2:
        raise ValidationError("leave-one-site-out needs at least two sites")
    out = []
    site_aware = method in ("rshscp", "adv_rshscp")
    for s in range(data.n_sites):
        inside = data.site_members(s)
        outside = np.flatnonzero(data.sites != s)
        comp = fit(data.subset(outside, reindex_sites=True), hp, method)
        single = data.subset(inside, reindex_sites=True)
        single_hp = hp.replace(gamma=0.0)
        fixed_v = comp.model.V if site_aware else None
        one = fit(single, single_hp, method, fixed_V=fixed_v)
        out.append(model_similarity(one.model, comp.model))
    return np.array(out)


# -- site prediction -------------------------------------------------------

def _train_classifier(x, y_idx, n_classes, kind, seed, epochs=300, lr=1e-2):
    if kind == "svm":
        return SVC(kernel="rbf", random_state=seed).fit(x, y_idx)
    hidden = {"logistic": (), "mlp_a": (50,), "mlp_b": (50, 25)}[kind]
    dropout = 0.0 if kind == "logistic" else 0.2
    clf = SiteClassifier(x.shape[1], n_classes, hidden=hidden, dropout=dropout, seed=seed,
                         lr=lr)
    y = np.eye(n_classes)[y_idx]
    for _ in range(epochs):
        clf.train_step(x, y)
    return clf


def site_prediction_cv(features, sites, folds=5, model="logistic", rng=0, epochs=300,
                       lr=1e-2):
    """Stratified k-fold site-prediction accuracy from subject weights.

    ``model`` is ``"logistic"``, ``"mlp_a"`` (50 hidden units), ``"mlp_b"``
    (50 and 25) or ``"svm"`` (RBF kernel).
    """
    if model not in ("logistic", "mlp_a", "mlp_b", "svm"):
        raise InvalidParameter(f"unknown site classifier {model!r}")
    x = np.asarray(features, dtype=float)
    sites = np.asarray(sites)
    uniq, y_idx = np.unique(sites, return_inverse=True)
    counts = np.bincount(y_idx)
    if counts.min() < folds:
        raise TooFewSubjects(f"every site needs >= {folds} subjects")
    rng = make_rng(rng)
    seed = int(rng.integers(2**31))
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accs = []
    for i, (tr, te) in enumerate(skf.split(x, y_idx)):
        mu = x[tr].mean(axis=0)
        sd = x[tr].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        xtr, xte = (x[tr] - mu) / sd, (x[te] - mu) / sd
        clf = _train_classifier(xtr, y_idx[tr], uniq.size, model, seed + i, epochs, lr)
        accs.append(np.mean(clf.predict(xte) == y_idx[te]))
    return float(np.mean(accs))


# -- grid search -----------------------------------------------------------

def expand_grid(grid):
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def grid_search(data, base_hp, grid, method, repeats=2, rng=0):
    """Pick the grid point with the highest split-sample reproducibility.

    Ties go to the smaller ``mu`` and then the smaller ``tau``.  Returns
    ``(best_hp, table)`` where each table row has the grid values plus
    ``mean``, ``sd`` and ``error`` (``None`` unless the fit failed).
    """
    from .exceptions import HSCPError

    points = expand_grid(grid)
    if not points:
        raise ValidationError("grid is empty")
    table = []
    for point in points:
        hp = base_hp.replace(**point) if isinstance(base_hp, Hyperparams) else Hyperparams(**{**base_hp, **point})
        row = dict(point)
        try:
            mean, sd, _ = split_sample_reproducibility(data, hp, method, rng, repeats)
            row.update(mean=mean, sd=sd, error=None)
        except HSCPError as exc:
            row.update(mean=float("-inf"), sd=float("nan"), error=str(exc))
        row["_hp"] = hp
        table.append(row)

    def key(row):
        hp = row["_hp"]
        return (-row["mean"], hp.mu, hp.tau[0])

    best = min(table, key=key)
    best_hp = best["_hp"]
    for row in table:
        del row["_hp"]
    return best_hp, table
