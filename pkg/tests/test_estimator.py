import numpy as np
import pytest
from sklearn.base import clone

from rshscp.estimator import HierarchicalSCP, check_matrices
from rshscp.exceptions import InvalidParameter, InvariantViolation, ShapeMismatch, UnknownSite
from rshscp.simulation import SimSpec, generate


@pytest.fixture(scope="module")
def sim():
    data, truth = generate(SimSpec(p=10, widths=(3,), subjects_per_site=(6, 6), seed=0))
    labels = np.where(data.sites == 0, "siteA", "siteB")
    return data, labels


def _est(**kw):
    base = dict(k=3, tau=3.0, max_iters=30, adv_start_iter=10, transform_iters=10,
                options={"site_warmup_iters": 5})
    base.update(kw)
    return HierarchicalSCP(**base)


def test_check_matrices():
    assert check_matrices(np.eye(3)).shape == (1, 3, 3)
    with pytest.raises(ShapeMismatch):
        check_matrices(np.ones((2, 3, 4)))
    with pytest.raises(InvariantViolation, match="subject 2"):
        check_matrices(np.stack([np.eye(3), 2 * np.eye(3)]))


def test_fit_transform_shapes(sim):
    data, labels = sim
    est = _est(method="rshscp", gamma=1.0).fit(data.matrices, labels)
    assert est.weights_.shape == (12, 3)
    assert est.components_[0].shape == (10, 3)
    assert list(est.site_encoder_.classes_) == ["siteA", "siteB"]
    new = est.transform(data.matrices[:4], labels[:4])
    assert new.shape == (4, 3) and np.all(new >= 0)
    assert est.reconstruct().shape == (12, 10, 10)


def test_transform_without_sites(sim):
    data, _ = sim
    est = _est().fit(data.matrices)
    assert est.transform(data.matrices[:2]).shape == (2, 3)


def test_unseen_site_and_wrong_p(sim):
    data, labels = sim
    est = _est().fit(data.matrices, labels)
    with pytest.raises(UnknownSite):
        est.transform(data.matrices[:2], ["siteA", "siteC"])
    with pytest.raises(ShapeMismatch):
        est.transform(np.eye(4))


def test_bad_method(sim):
    data, _ = sim
    with pytest.raises(InvalidParameter):
        _est(method="pca").fit(data.matrices)


def test_sklearn_params_and_clone(sim):
    data, labels = sim
    est = _est(method="hscp", seed=3)
    params = est.get_params()
    assert params["seed"] == 3 and params["method"] == "hscp"
    twin = clone(est)
    a = est.fit(data.matrices, labels).weights_
    b = twin.fit(data.matrices, labels).weights_
    assert np.array_equal(a, b)


def test_fit_transform_matches_weights(sim):
    data, labels = sim
    est = _est()
    assert np.array_equal(est.fit_transform(data.matrices, labels), est.weights_)
