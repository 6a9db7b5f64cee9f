import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rshscp.baselines import SPD_FLOOR, combat_hscp_fit, harmonize_features, shifted_weights
from rshscp.exceptions import DegenerateSite
from rshscp.model import Hyperparams
from rshscp.simulation import SimSpec, generate


def test_harmonised_sites_share_location_and_scale():
    rng = np.random.default_rng(0)
    sites = np.repeat([0, 1, 2], [10, 15, 20])
    x = rng.normal(size=(45, 3)) * (1 + sites[:, None]) + 5 * sites[:, None]
    h, params = harmonize_features(x, sites)
    for s in range(3):
        assert np.allclose(h[sites == s].mean(axis=0), x.mean(axis=0))
        assert np.allclose(h[sites == s].std(axis=0), x.std(axis=0))
    assert params.site_mean.shape == (3, 3)
    assert np.allclose(params.apply(x, sites), h)


def test_single_subject_site_is_degenerate():
    with pytest.raises(DegenerateSite):
        harmonize_features(np.ones((3, 2)), np.array([0, 0, 1]))


def test_constant_feature_only_shifted():
    sites = np.repeat([0, 1], 4)
    x = np.column_stack([np.where(sites == 0, 1.0, 3.0), np.arange(8.0)])
    h, _ = harmonize_features(x, sites)
    assert np.allclose(h[:, 0], 2.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_harmonisation_idempotent(seed, n_sites):
    rng = np.random.default_rng(seed)
    sites = np.repeat(np.arange(n_sites), 5)
    x = rng.normal(size=(sites.size, 2)) + rng.normal(size=(n_sites, 2))[sites]
    once, _ = harmonize_features(x, sites)
    twice, _ = harmonize_features(once, sites)
    assert np.allclose(once, twice, atol=1e-10)


def test_combat_hscp_fit_runs():
    data, _ = generate(SimSpec(p=10, widths=(3,), subjects_per_site=(5, 6), seed=1))
    hp = Hyperparams(k=(3,), tau=(3.0,), max_iters=25, adv_start_iter=10)
    rep = combat_hscp_fit(data, hp)
    assert rep.method == "combat_hscp"
    assert set(rep.extras) >= {"delta", "shift", "harmonization", "first_stage"}
    lam = shifted_weights(rep)[0]
    assert np.array_equal(lam, rep.model.Lambda[0])
    assert lam.min() >= SPD_FLOOR - 1e-15
    assert np.all(np.isfinite(rep.recon_trace))
    assert rep.n_iter >= 1


def test_combat_single_site_skips_harmonisation():
    data, _ = generate(SimSpec(p=10, widths=(3,), subjects_per_site=(6,), seed=2))
    hp = Hyperparams(k=(3,), tau=(3.0,), max_iters=10, adv_start_iter=5)
    rep = combat_hscp_fit(data, hp, refit_iters=0)
    first = rep.extras["first_stage"].model.Lambda[0]
    assert np.allclose(rep.extras["delta"][0], first)
