"""Estimator-contract behavior of the sklearn-style denoiser wrapper."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qudiff.estimator import ScoreDiffusionDenoiser
from qudiff.rng import keyed_generator


def small_estimator(**overrides):
    kwargs = dict(hidden_units=16, train_steps=120, batch_size=64,
                  learning_rate=3e-3, reverse_steps=40, random_state=5)
    kwargs.update(overrides)
    return ScoreDiffusionDenoiser(**kwargs)


def test_get_set_params_round_trip():
    est = small_estimator()
    params = est.get_params()
    assert params["train_steps"] == 120
    assert params["alpha"] == 1.0
    est.set_params(train_steps=7, beta=0.5)
    assert est.train_steps == 7 and est.beta == 0.5
    with pytest.raises(ValueError):
        est.set_params(nonexistent=1)


def test_clone_preserves_params_only():
    est = small_estimator()
    data = keyed_generator(201, 0).standard_normal((200, 2))
    est.fit(data)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert not hasattr(twin, "net_")


def test_transform_before_fit_raises():
    est = small_estimator()
    with pytest.raises(NotFittedError):
        est.transform(np.zeros((3, 2)))
    with pytest.raises(NotFittedError):
        est.score_function(np.zeros((3, 2)), 0.5)


def test_fit_returns_self_and_sets_state():
    est = small_estimator()
    data = keyed_generator(202, 0).standard_normal((300, 2))
    assert est.fit(data) is est
    assert est.n_features_in_ == 2
    assert est.loss_curve_.shape == (120,)
    assert est.smoothed_loss_[-1] < est.smoothed_loss_[5]


def test_transform_shape_and_feature_check():
    est = small_estimator().fit(keyed_generator(203, 0).standard_normal((200, 3)))
    noisy = keyed_generator(203, 1).standard_normal((11, 3))
    out = est.transform(noisy)
    assert out.shape == (11, 3)
    assert np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        est.transform(np.zeros((4, 2)))


def test_input_validation_rejects_garbage():
    est = small_estimator()
    with pytest.raises(ValueError):
        est.fit(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        est.fit(np.zeros(5))  # 1-D input


def test_same_seed_same_output():
    data = keyed_generator(204, 0).standard_normal((250, 2))
    noisy = keyed_generator(204, 1).standard_normal((9, 2))
    a = small_estimator().fit(data).transform(noisy)
    b = small_estimator().fit(data).transform(noisy)
    c = small_estimator(random_state=6).fit(data).transform(noisy)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_corrupt_then_denoise_improves_on_gaussian_cluster():
    # a tight cluster is easy to denoise; posterior mass sits at the center
    rng = keyed_generator(205, 0)
    data = 0.25 * rng.standard_normal((600, 2)) + np.array([1.0, -0.5])
    est = small_estimator(train_steps=400, corruption_time=0.6).fit(data)
    clean = 0.25 * rng.standard_normal((50, 2)) + np.array([1.0, -0.5])
    noisy = est.corrupt(clean)
    denoised = est.transform(noisy)
    err_noisy = np.linalg.norm(noisy - clean, axis=1).mean()
    err_denoised = np.linalg.norm(denoised - clean, axis=1).mean()
    assert err_denoised < err_noisy


def test_score_function_shape():
    est = small_estimator().fit(keyed_generator(206, 0).standard_normal((150, 2)))
    s = est.score_function(np.zeros((5, 2)), 0.4)
    assert s.shape == (5, 2)
