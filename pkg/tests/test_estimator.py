import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gudl.baselines import omp
from gudl.core import StandardProblem, ValidationError
from gudl.estimator import DeqChannelEstimator, SparseBaselineEstimator
from gudl.neural import lipschitz_upper_bound


def _tiny(synthetic_batch):
    A, H, problem = synthetic_batch
    return A, H, problem.y, problem.sigma2


def test_params_roundtrip_and_clone(small_A):
    est = DeqChannelEstimator(A=small_A, loss="nmse", epochs=3, lr=5e-3)
    params = est.get_params()
    assert params["loss"] == "nmse" and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params()["lr"] == 5e-3
    assert twin is not est
    est.set_params(lip_target=0.5)
    assert est.lip_target == 0.5


def test_predict_before_fit_raises(small_A):
    with pytest.raises(NotFittedError):
        DeqChannelEstimator(A=small_A).predict(np.zeros((2, 4)))


def test_fit_requires_A():
    with pytest.raises(ValidationError):
        DeqChannelEstimator().fit(np.zeros((2, 4)), sigma2=0.1)


@pytest.mark.parametrize("loss", ["nmse", "gsure"])
def test_fit_predict_tiny(synthetic_batch, loss):
    A, H, Y, sigma2 = _tiny(synthetic_batch)
    est = DeqChannelEstimator(A=A, loss=loss, epochs=2, batch_size=8, max_steps=4, random_state=1)
    est.fit(Y, H, sigma2=sigma2)
    out = est.predict(Y)
    assert out.shape == H.shape
    assert np.all(np.isfinite(out))
    assert len(est.history_) > 0
    assert est.n_features_in_ == A.shape[0]
    assert np.isfinite(est.score(Y, H))
    assert lipschitz_upper_bound(est.model_) <= est.lip_target * (1 + 1e-9)
    res = est.solve(Y)
    assert res.all_converged


def test_fit_is_reproducible(synthetic_batch):
    A, H, Y, sigma2 = _tiny(synthetic_batch)
    kw = dict(A=A, loss="nmse", epochs=1, batch_size=8, max_steps=3, random_state=4)
    a = DeqChannelEstimator(**kw).fit(Y, H, sigma2=sigma2).predict(Y)
    b = DeqChannelEstimator(**kw).fit(Y, H, sigma2=sigma2).predict(Y)
    assert_array_equal(a, b)


def test_predict_rejects_wrong_width(synthetic_batch):
    A, H, Y, sigma2 = _tiny(synthetic_batch)
    est = DeqChannelEstimator(A=A, loss="nmse", epochs=1, batch_size=8, max_steps=1).fit(Y, H, sigma2=sigma2)
    with pytest.raises(ValidationError):
        est.predict(np.zeros((2, A.shape[0] + 1)))


def test_baseline_estimator_matches_functional(synthetic_batch):
    A, H, Y, _ = _tiny(synthetic_batch)
    est = SparseBaselineEstimator(A=A, algorithm="omp", k_target=4).fit(Y)
    assert_allclose(est.predict(Y), omp(StandardProblem(A, None, 0.0, y=Y), 4))
    assert clone(est).get_params()["k_target"] == 4
    for algo in ("ista", "amp"):
        out = SparseBaselineEstimator(A=A, algorithm=algo).fit(Y).predict(Y)
        assert out.shape == H.shape


def test_baseline_estimator_validation(synthetic_batch):
    A, _, Y, _ = _tiny(synthetic_batch)
    with pytest.raises(ValidationError):
        SparseBaselineEstimator(A=A, algorithm="lasso").fit(Y)
    with pytest.raises(ValidationError):
        SparseBaselineEstimator(A=A).fit(Y[:, :-1])
    with pytest.raises(NotFittedError):
        SparseBaselineEstimator(A=A).predict(Y)
