import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikerecon import regression as rg
from spikerecon.errors import ShapeError, SingularSystemError, ValidationError


def oracle_fit(X, Y, lam):
    """Independent normal-equations solve via explicit inverse."""
    mu, sd = X.mean(0), X.std(0)
    sd = np.where(sd == 0, 1.0, sd)
    Xs = (X - mu) / sd
    ym = Y.mean(0)
    N = X.shape[0]
    W = np.linalg.inv(Xs.T @ Xs + lam * N * np.eye(X.shape[1])) @ (Xs.T @ (Y - ym))
    return W, ym


def test_identity_case():
    # orthogonal design already standardized (mean 0, std 1 per column),
    # so Y = X at lambda 0 must give W = I
    X = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    Y = X.copy()
    m = rg.ridge_fit(X, Y, 0.0)
    assert np.allclose(m.weights, np.eye(2), atol=1e-10)
    assert np.allclose(rg.ridge_predict(m, X), Y, atol=1e-8)


def test_analytic_half_shrinkage():
    # with standardized X and lam*N = trace scale, W = (I + I)^-1 X'Y = 0.5 X'Y
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 2))
    mu, sd = X.mean(0), X.std(0)
    Xs = (X - mu) / sd
    Y = Xs.copy()
    N = X.shape[0]
    G = Xs.T @ Xs
    lam = 1.0  # lam*N = N; compare against the explicit closed form
    m = rg.ridge_fit(X, Y, lam)
    expect = np.linalg.solve(G + lam * N * np.eye(2), G)
    assert np.allclose(m.weights, expect, atol=1e-10)


def test_oracle_equivalence_battery():
    # the acceptance suite repeats this oracle check at larger sizes
    rng = np.random.default_rng(1)
    for trial in range(10):
        N = rng.integers(10, 50)
        U = rng.integers(2, 20)
        D = rng.integers(1, 5)
        X = rng.normal(size=(N, U))
        Y = rng.normal(size=(N, D))
        lam = float(rng.uniform(0.01, 1.0))
        m = rg.ridge_fit(X, Y, lam)
        W, ym = oracle_fit(X, Y, lam)
        rel = np.abs(m.weights - W) / np.maximum(np.abs(W), 1e-12)
        assert np.max(rel) <= 1e-8
        pred = rg.ridge_predict(m, X)
        mu, sd = X.mean(0), np.where(X.std(0) == 0, 1.0, X.std(0))
        oracle_pred = ((X - mu) / sd) @ W + ym
        assert np.allclose(pred, oracle_pred, atol=1e-10)


def test_zero_lambda_rank_deficient():
    X = np.ones((6, 3))
    X[:, 1] = np.arange(6)
    X[:, 2] = 2 * np.arange(6)  # collinear
    with pytest.raises(SingularSystemError, match="lambda"):
        rg.ridge_fit(X, np.ones((6, 1)), 0.0)


def test_zero_row_prediction_is_affine():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(30, 4))
    Y = rng.normal(size=(30, 2))
    m = rg.ridge_fit(X, Y, 0.1)
    pred = rg.ridge_predict(m, np.zeros((1, 4)))
    expect = ((np.zeros(4) - m.x_mean) / m.x_std) @ m.weights + m.intercept
    assert np.allclose(pred[0], expect)


def test_predict_shape_mismatch():
    m = rg.ridge_fit(np.random.default_rng(0).normal(size=(10, 3)),
                     np.ones((10, 1)), 0.1)
    with pytest.raises(ShapeError):
        rg.ridge_predict(m, np.ones((2, 4)))


def test_weight_norm_monotone_in_lambda():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 6))
    Y = rng.normal(size=(40, 2))
    norms = [np.linalg.norm(rg.ridge_fit(X, Y, lam).weights)
             for lam in (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)]
    assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:]))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_row_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 4))
    Y = rng.normal(size=(25, 2))
    perm = rng.permutation(25)
    a = rg.ridge_fit(X, Y, 0.1)
    b = rg.ridge_fit(X[perm], Y[perm], 0.1)
    assert np.allclose(a.weights, b.weights, atol=1e-10)
    assert np.allclose(a.intercept, b.intercept, atol=1e-10)


# ---- cross validation ----


def test_cv_singleton_grid():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(30, 3))
    Y = rng.normal(size=(30, 1))
    report, model = rg.ridge_cv(X, Y, [0.37], k=3)
    assert report.selected_lambda == 0.37
    assert model.lam == 0.37


def test_cv_low_noise_picks_small_lambda():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(100, 5))
    W = rng.normal(size=(5, 2))
    noise = 1e-4
    Y = X @ W + noise * rng.normal(size=(100, 2))
    grid = [1e-6, 1e-2, 1.0, 100.0]
    report, _ = rg.ridge_cv(X, Y, grid, k=5)
    assert report.selected_lambda == 1e-6
    best = report.fold_mse.mean(axis=0).min()
    assert best < 100 * noise ** 2 * 5  # validation MSE on the noise scale


def test_cv_tie_breaks_toward_larger_lambda():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(20, 3))
    Y = rng.normal(size=(20, 1))
    report, _ = rg.ridge_cv(X, Y, [0.5, 0.5, 0.5], k=4)
    assert report.selected_lambda == 0.5


def test_cv_rejects_negative_lambda():
    X = np.random.default_rng(7).normal(size=(20, 3))
    with pytest.raises(ValidationError):
        rg.ridge_cv(X, np.ones((20, 1)), [-0.1, 1.0], k=2)


def test_temporal_folds_are_contiguous_blocks():
    folds = rg.temporal_folds(10, 3)
    seen = []
    for lo, hi in folds:
        assert hi > lo
        seen.extend(range(lo, hi))
    assert seen == list(range(10))  # ordered, disjoint, exhaustive


# ---- persistence ----


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    X = rng.normal(size=(30, 4))
    Y = rng.normal(size=(30, 2))
    m = rg.ridge_fit(X, Y, 0.3)
    p = tmp_path / "ridge.bin"
    rg.save_ridge(p, m)
    back = rg.load_ridge(p)
    assert back.lam == m.lam
    assert np.array_equal(back.weights, m.weights)
    assert np.array_equal(back.intercept, m.intercept)
    Xq = rng.normal(size=(5, 4))
    assert np.array_equal(rg.ridge_predict(back, Xq), rg.ridge_predict(m, Xq))
