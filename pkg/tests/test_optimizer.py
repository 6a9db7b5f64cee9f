import numpy as np
import pytest

from conftest import random_instance
from rshscp.amsgrad import AmsgradGroup, AmsgradState
from rshscp.exceptions import InvalidMethodConfig, InvalidParameter, NonFiniteGradient, NumericalError
from rshscp.model import Hyperparams, validate
from rshscp.objective import perturb
from rshscp.optimizer import METHODS, attack_step, fit, project_W, svd_init
from rshscp.simulation import SimSpec, generate


@pytest.fixture(scope="module")
def small():
    data, truth = generate(SimSpec(p=12, widths=(4, 2), subjects_per_site=(5, 5), seed=3))
    hp = Hyperparams(k=(4, 2), tau=(4.0,), max_iters=40, adv_start_iter=15,
                     site_warmup_iters=5, min_adv_iters=5)
    return data, truth, hp


def test_amsgrad_matches_hand_recursion():
    st = AmsgradState((2,))
    x = np.array([1.0, -1.0])
    g1, g2 = np.array([0.5, -2.0]), np.array([-0.1, 1.0])
    x1 = st.step(x, g1, 0.1)
    m = 0.1 * g1
    v = 0.001 * g1 ** 2
    assert np.allclose(x1, x - 0.1 * m / (np.sqrt(v) + 1e-8))
    x2 = st.step(x1, g2, 0.1)
    m = 0.9 * m + 0.1 * g2
    v_new = 0.999 * v + 0.001 * g2 ** 2
    vhat = np.maximum(v, v_new)
    assert np.allclose(x2, x1 - 0.1 * m / (np.sqrt(vhat) + 1e-8))
    with pytest.raises(NonFiniteGradient):
        st.step(x2, np.array([np.nan, 0.0]), 0.1)


def test_amsgrad_group_keys_independent():
    grp = AmsgradGroup()
    a = grp.step("a", np.zeros(1), np.ones(1), 0.1)
    b = grp.step("b", np.zeros(1), np.ones(1), 0.1)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("method", METHODS)
def test_fit_is_feasible_and_traced(small, method):
    data, _, hp = small
    hp = hp.replace(gamma=1.0 if "rshscp" in method else 0.0)
    rep = fit(data, hp, method)
    assert validate(rep.model, hp) == []
    assert len(rep.recon_trace) == rep.n_iter + 1 == len(rep.phase_trace)
    assert np.all(np.isfinite(rep.objective_trace))
    if method.startswith("adv"):
        assert rep.adv_start is not None and rep.model.W_tilde is not None
        assert "adv" in rep.phase_trace and rep.sigma > 0
    else:
        assert rep.model.W_tilde is None and "adv" not in rep.phase_trace
    if "rshscp" in method:
        assert rep.phase_trace[1:6] == ["warmup"] * 5
        assert rep.model.has_site_terms and rep.classifier is not None
    else:
        assert rep.model.U is None


def test_fit_decreases_reconstruction(small):
    data, _, hp = small
    rep = fit(data, hp.replace(max_iters=80, adv_start_iter=80), "hscp")
    assert rep.recon_trace[-1] < rep.recon_trace[0]


def test_fit_deterministic(small):
    data, _, hp = small
    hp = hp.replace(gamma=1.0)
    a = fit(data, hp, "adv_rshscp").model
    b = fit(data, hp, "adv_rshscp").model
    for name in ("W", "Lambda", "U", "V", "W_tilde"):
        for x, y in zip(getattr(a, name), getattr(b, name)):
            assert np.array_equal(x, y)


def test_random_init_and_callback(small):
    data, _, hp = small
    calls = []
    rep = fit(data, hp.replace(max_iters=5, adv_start_iter=5), "hscp", init="random",
              callback=lambda *a: calls.append(a))
    assert len(calls) == rep.n_iter
    assert calls[0][1] == "pre" and len(calls[0]) == 4
    with pytest.raises(InvalidParameter):
        fit(data, hp, "hscp", init="kmeans")


def test_frozen_blocks_unchanged(small):
    data, _, hp = small
    hp = hp.replace(max_iters=10, adv_start_iter=10)
    start = fit(data, hp, "rshscp").model
    rep = fit(data, hp, "rshscp", init_model=start, freeze=("W", "U", "V"))
    for a, b in zip(start.W + start.U + start.V, rep.model.W + rep.model.U + rep.model.V):
        assert np.array_equal(a, b)
    assert not np.array_equal(start.Lambda[0], rep.model.Lambda[0])


def test_method_configuration_errors(small):
    data, _, hp = small
    with pytest.raises(InvalidMethodConfig):
        fit(data, hp, "nmf")
    with pytest.raises(InvalidMethodConfig):
        fit(data, hp.replace(gamma=1.0), "hscp")
    with pytest.raises(InvalidMethodConfig):
        fit(data, Hyperparams(k=(12,)), "hscp")


def test_divergence_raises(small):
    data, _, hp = small
    # either the gradient or the objective goes non-finite first
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        fit(data, hp.replace(lr_w=1e200, lr_lambda=1e200), "hscp")


def test_huge_alpha_pins_twin():
    data, model = random_instance(0)
    hp = Hyperparams(k=(4, 2), tau=(3.0,), alpha=1e12, attack_steps=3)
    model.W = [project_W(w, r, hp.tau) for r, w in enumerate(model.W)]
    model.W_tilde = [w.copy() for w in model.W]
    attack_step(model, perturb(data), hp)
    for a, b in zip(model.W_tilde, model.W):
        assert np.max(np.abs(a - b)) <= 1e-4


def test_zero_alpha_twin_moves():
    data, model = random_instance(1)
    model.W_tilde = [w.copy() for w in model.W]
    attack_step(model, perturb(data), Hyperparams(k=(4, 2), tau=(100.0,), alpha=0.0))
    assert not np.array_equal(model.W_tilde[0], model.W[0])


def test_svd_init_feasible(small):
    data, _, hp = small
    W, lam = svd_init(data, hp.k, hp.tau)
    assert np.all(np.abs(W[0]).max(axis=0) <= 1) and np.all(W[1] >= 0)
    assert all(np.all(l >= 0) for l in lam)
    with pytest.raises(InvalidParameter):
        svd_init(data, (20,), (1.0,))


def test_hyperparams_checks():
    with pytest.raises(InvalidParameter):
        Hyperparams(k=(3, 3))
    with pytest.raises(InvalidParameter):
        Hyperparams(tau=(-1.0,))
    with pytest.raises(InvalidParameter):
        Hyperparams(max_iters=10, adv_start_iter=20)
    with pytest.raises(InvalidParameter):
        Hyperparams.from_dict({"k": [3], "bogus": 1})
    hp = Hyperparams(k=(5, 2), tau=3)
    assert hp.tau == (3.0, 3.0)
    assert Hyperparams.from_dict(hp.to_dict()) == hp
