import numpy as np
import pytest

from fedmesh.fed_ml.data import add_intercept
from fedmesh.fed_ml.linreg import SingularityError, aggregate_linreg, local_linreg_stats, ols
from fedmesh.fed_ml.logreg import (
    GradientHessian,
    SeparationError,
    aggregate_logreg_step,
    local_logreg_step,
    log_likelihood,
    newton_fit,
    predict,
)


def test_identity_stats():
    XtX, Xty, n = local_linreg_stats(np.eye(2), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(XtX, np.eye(2))
    np.testing.assert_array_equal(Xty, [1.0, 2.0])
    assert n == 2


def test_duplicating_rows_doubles_stats():
    # integer entries keep every sum exact, so equality can be exact
    rng = np.random.default_rng(1)
    X, y = rng.integers(-9, 10, size=(15, 3)).astype(float), rng.integers(-9, 10, size=15).astype(float)
    a = local_linreg_stats(X, y)
    b = local_linreg_stats(np.vstack([X, X]), np.concatenate([y, y]))
    np.testing.assert_array_equal(b[0], 2 * a[0])
    np.testing.assert_array_equal(b[1], 2 * a[1])


def test_stats_are_symmetric_psd():
    X = np.random.default_rng(2).normal(size=(20, 3))
    XtX, _, _ = local_linreg_stats(X, np.zeros(20))
    np.testing.assert_allclose(XtX, X.T @ X, rtol=1e-14)
    assert np.array_equal(XtX, XtX.T)
    assert np.linalg.eigvalsh(XtX).min() >= -1e-12


def test_one_participant_is_local_ols():
    rng = np.random.default_rng(3)
    X = add_intercept(rng.normal(size=(30, 4)))
    y = rng.normal(size=30)
    np.testing.assert_allclose(aggregate_linreg([local_linreg_stats(X, y)]), ols(X, y), atol=1e-10)


def test_noise_free_recovery():
    rng = np.random.default_rng(4)
    beta = np.array([3.0, -1.0, 0.5, 2.0])
    X = add_intercept(rng.normal(size=(60, 3)))
    y = X @ beta
    stats = [local_linreg_stats(X[:25], y[:25]), local_linreg_stats(X[25:], y[25:])]
    np.testing.assert_allclose(aggregate_linreg(stats), beta, atol=1e-10)


def test_collinear_design_is_singular():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x, 2 * x])
    with pytest.raises(SingularityError) as exc:
        aggregate_linreg([local_linreg_stats(X, x)], names=["intercept", "a", "b"])
    assert "condition" in str(exc.value) or "singular" in str(exc.value)


def _logit_data(seed, n=80, p=3):
    rng = np.random.default_rng(seed)
    X = add_intercept(rng.normal(size=(n, p)))
    beta = rng.normal(size=p + 1)
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    return X, y, beta


def test_gradient_and_hessian_at_zero():
    X, y, _ = _logit_data(5)
    gh = local_logreg_step(X, y, np.zeros(X.shape[1]))
    np.testing.assert_allclose(gh.g, X.T @ (y - 0.5), rtol=1e-14)
    np.testing.assert_allclose(gh.H, 0.25 * X.T @ X, rtol=1e-14)


def test_gradient_matches_finite_differences():
    X, y, beta = _logit_data(6)
    g = local_logreg_step(X, y, beta).g
    h = 1e-6
    fd = np.array([
        (log_likelihood(X, y, beta + h * e) - log_likelihood(X, y, beta - h * e)) / (2 * h)
        for e in np.eye(len(beta))
    ])
    assert np.max(np.abs(g - fd)) / np.max(np.abs(g)) <= 1e-6


def test_zero_gradient_is_stationary():
    H = np.eye(3) * 2
    beta = np.array([0.1, 0.2, 0.3])
    new, done = aggregate_logreg_step([GradientHessian(np.zeros(3), H, 10)], beta)
    np.testing.assert_array_equal(new, beta)
    assert done


def test_federated_newton_equals_centralized():
    X, y, _ = _logit_data(7, n=200, p=4)
    parts = [(X[:70], y[:70]), (X[70:], y[70:])]
    beta = np.zeros(X.shape[1])
    for r in range(50):
        beta, done = aggregate_logreg_step([local_logreg_step(a, b, beta) for a, b in parts], beta, r)
        if done:
            break
    central, _ = newton_fit(X, y)
    assert np.max(np.abs(beta - central)) <= 1e-6
    np.testing.assert_array_equal(predict(X, beta), predict(X, central))


def test_single_participant_matches_centralized_iterate():
    X, y, _ = _logit_data(8)
    b0 = np.zeros(X.shape[1])
    fed, _ = aggregate_logreg_step([local_logreg_step(X, y, b0)], b0)
    _, path = newton_fit(X, y, max_iter=1)
    np.testing.assert_array_equal(fed, path[0])


def test_perfect_separation_raises_with_last_beta():
    x = np.concatenate([np.linspace(-3, -1, 20), np.linspace(1, 3, 20)])
    X = add_intercept(x[:, None])
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError) as exc:
        newton_fit(X, y, max_iter=200)
    assert np.all(np.isfinite(exc.value.beta))
    assert exc.value.beta[1] > 0
