"""Invariants of the objective, model validation and optimiser."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_instance
from rshscp.classifier import SiteClassifier
from rshscp.evaluation import component_accuracy
from rshscp.model import (
    FactorModel,
    Hyperparams,
    MultiSiteDataset,
    check_correlation_matrix,
    validate,
)
from rshscp.numerics import make_rng, spd_repair, unit_diagonal_rescale
from rshscp.objective import (
    GradWorkspace,
    eval_G,
    eval_H,
    eval_J,
    grad_J_W,
    objective_and_error,
    perturb,
    reconstruction_error,
)
from rshscp.optimizer import attack_step, fit, project_W
from rshscp.simulation import SimSpec, generate


def _naive_recon(model, data):
    num = 0.0
    for r in range(model.depth):
        y = model.Y()[r]
        for n in range(data.n_subjects):
            x = data.matrices[n].copy()
            if model.has_site_terms:
                x -= np.diag(model.U[r][data.sites[n]]) @ model.V[r]
            num += np.sum((x - y @ np.diag(model.Lambda[r][n]) @ y.T) ** 2)
    return num / (model.depth * np.sum(data.matrices ** 2))


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_error_matches_naive(seed):
    data, model = random_instance(seed)
    assert reconstruction_error(model, data) == pytest.approx(_naive_recon(model, data), rel=1e-12)
    _, rec = objective_and_error(model, data)
    assert rec == pytest.approx(reconstruction_error(model, data), rel=1e-12)


def test_reconstruction_error_extremes():
    data, model = random_instance(0, twin=False, site_terms=False)
    zero = FactorModel([np.zeros_like(w) for w in model.W], model.Lambda)
    assert reconstruction_error(zero, data) == pytest.approx(1.0)
    y = model.Y()
    exact = data.__class__(np.stack([y[0] @ np.diag(l) @ y[0].T for l in model.Lambda[0]]),
                           data.sites, data.n_sites)
    one = FactorModel(model.W[:1], model.Lambda[:1])
    assert reconstruction_error(one, exact) <= 1e-28


def test_g_equals_h_without_site_effect():
    data, model = random_instance(1)
    model.U = [np.zeros_like(u) for u in model.U]
    assert eval_G(model, data) == eval_H(model, data)


def test_workspace_cache_invisible():
    data, model = random_instance(2)
    ws = GradWorkspace(model, data)
    explicit = GradWorkspace(model, data, X=GradWorkspace(model, data).X)
    for r in range(model.depth):
        assert np.allclose(grad_J_W(model, data, r, ws=ws), grad_J_W(model, data, r), atol=1e-12)
        assert np.allclose(grad_J_W(model, data, r, ws=explicit), grad_J_W(model, data, r),
                           atol=1e-12)


def test_perturbed_data_are_correlation_matrices():
    data, _ = random_instance(3)
    pdata = perturb(data)
    assert pdata.sigma > 0
    for m in pdata.data.matrices:
        check_correlation_matrix(m)


def test_adversary_sign_flips_classifier_term():
    data, model = random_instance(4)
    clf = SiteClassifier(6, 2, hidden=(4,), dropout=0.0, seed=0)
    base = eval_J(model, data)
    minus = eval_J(model, data, clf, 1.0, 1.0, -1.0)
    plus = eval_J(model, data, clf, 1.0, 1.0, 1.0)
    assert minus - base == pytest.approx(base - plus)
    assert plus > base


def test_dropout_eval_is_identity():
    clf = SiteClassifier(3, 2, hidden=(6,), dropout=0.5, seed=0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(clf.forward(x)[0], clf.forward(x, train_mode=False)[0])
    masks = clf.sample_masks(20000, np.random.default_rng(1))
    assert masks[0].mean() == pytest.approx(1.0, abs=0.02)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_rescale_idempotent_and_repair_monotone(p, seed):
    a = make_rng(seed).normal(size=(p, p))
    a = a @ a.T + 0.1 * np.eye(p)
    r = unit_diagonal_rescale(a)
    assert np.max(np.abs(unit_diagonal_rescale(r) - r)) <= 1e-14
    b = make_rng(seed + 1).normal(size=(p, p))
    b = b + b.T
    before = np.linalg.eigvalsh(b)
    after = np.linalg.eigvalsh(spd_repair(b, 1e-3))
    assert np.all(after >= before - 1e-12)


def _feasible(seed):
    data, model = random_instance(seed)
    hp = Hyperparams(k=(4, 2), tau=(3.0,), mu=0.5)
    model.W = [project_W(w, r, hp.tau) for r, w in enumerate(model.W)]
    model.W_tilde = [w.copy() for w in model.W]
    model.V = [np.zeros_like(v) for v in model.V]
    return data, model, hp


def test_validate_catches_each_perturbation():
    data, model, hp = _feasible(0)
    assert validate(model, hp) == []
    bad = model.copy()
    bad.Lambda[0][2, 1] = -0.1
    assert any("subject 2" in m and "index 1" in m for m in validate(bad, hp))
    bad = model.copy()
    bad.W[0][:, 1] = 0.0
    bad.W[0][:4, 1] = [1.0, -1.0, 1.0, 0.5]  # L1 = tau + 0.5
    assert any("column 1: L1" in m for m in validate(bad, hp))
    bad = model.copy()
    bad.W[0][0, 0] = 1.5
    assert any("Linf" in m for m in validate(bad, hp))
    bad = model.copy()
    bad.W[1][0, 0] = -1e-3
    assert any("W[2]" in m for m in validate(bad, hp))
    bad = model.copy()
    bad.V[0][:, 3] = 1.0
    assert any("V[1] column 3" in m for m in validate(bad, hp))
    bad = model.copy()
    bad.W_tilde[0][0, 0] = 2.0
    assert any(m.startswith("W_tilde") for m in validate(bad, hp))
    simplex = hp.replace(lambda_projection="renormalize")
    assert any("trace" in m for m in validate(model, simplex))


def _attack_objective(model, pdata, alpha):
    twin = FactorModel(model.W_tilde, model.Lambda)
    return alpha * sum(np.sum((a - b) ** 2) for a, b in zip(model.W_tilde, model.W)) \
        + eval_H(twin, pdata.data)


def test_attack_step_does_not_increase_objective():
    data, model, hp = _feasible(1)
    hp = hp.replace(alpha=1.0, lr_attack=1e-4)
    pdata = perturb(data)
    before = _attack_objective(model, pdata, hp.alpha)
    attack_step(model, pdata, hp)
    assert _attack_objective(model, pdata, hp.alpha) <= before


def test_attack_fixed_at_exact_fit():
    rng = np.random.default_rng(0)
    w = project_W(rng.normal(size=(6, 2)), 0, (3.0,))
    lam = rng.uniform(0.5, 1.0, (4, 2))
    mats = np.stack([w @ np.diag(l) @ w.T for l in lam])
    data = MultiSiteDataset(mats, np.zeros(4, dtype=int), 1)
    model = FactorModel([w], [lam], W_tilde=[w.copy()])
    attack_step(model, data, Hyperparams(k=(2,), tau=(3.0,)))
    assert np.max(np.abs(model.W_tilde[0] - w)) <= 1e-9


def test_twin_distance_decreases_with_alpha():
    data, _ = generate(SimSpec(p=10, widths=(3,), subjects_per_site=(5, 5), seed=2))
    dist = []
    for alpha in (0.1, 1.0, 10.0):
        hp = Hyperparams(k=(3,), tau=(3.0,), alpha=alpha, gamma=1.0, max_iters=40,
                         adv_start_iter=10, site_warmup_iters=5, min_adv_iters=30,
                         stop_tol=0.0)
        m = fit(data, hp, "adv_rshscp").model
        dist.append(np.linalg.norm(m.W_tilde[0] - m.W[0]))
    assert dist[0] > dist[1] > dist[2]


def test_rshscp_without_classifier_is_hscp_plus_site_terms():
    data, _ = generate(SimSpec(p=10, widths=(3,), subjects_per_site=(5, 5), seed=3))
    hp = Hyperparams(k=(3,), tau=(3.0,), max_iters=5, adv_start_iter=5, site_warmup_iters=0)
    rsh = fit(data, hp, "rshscp")
    assert rsh.classifier is None
    # with the site term removed the fitted W and Lambda follow the hSCP update rule
    start = fit(data, hp.replace(max_iters=0, adv_start_iter=0), "rshscp").model
    start.U = [np.zeros_like(u) for u in start.U]
    frozen = fit(data, hp, "rshscp", init_model=start, freeze=("U", "V"))
    plain_start = FactorModel([w.copy() for w in start.W], [l.copy() for l in start.Lambda])
    plain = fit(data, hp, "hscp", init_model=plain_start)
    for a, b in zip(frozen.model.W + frozen.model.Lambda, plain.model.W + plain.model.Lambda):
        assert np.allclose(a, b, atol=1e-12)


def test_two_level_planted_recovers_cumulative_product():
    # only Y_2 = W_1 W_2 is identifiable from the level-2 term; W_1 on its own is not
    spec = SimSpec(p=20, widths=(5, 2), subjects_per_site=(10,), noise_sd=0.0, u_mean=0.0,
                   u_sd=0.0, v_scale=0.0, seed=0, rescale=False)
    data, truth = generate(spec)
    hp = Hyperparams(k=(5, 2), tau=(20.0,), max_iters=2000, adv_start_iter=2000,
                     lr_w=1e-2, lr_lambda=1e-2, stop_tol=1e-12)
    model = fit(data, hp, "hscp").model
    assert component_accuracy(model.Y()[1], truth.Y[1]).mean >= 0.9
