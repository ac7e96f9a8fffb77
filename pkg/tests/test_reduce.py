import json

import numpy as np
import pytest

from errors import ConfigError, EmptyInputError, PrognosisError
from reduce import (
    LASSO_INNER_FOLDS,
    ReductionTransform,
    fit_reduction,
    inner_folds,
    lambda_max,
    lasso_fit,
    lasso_grid,
    lasso_path,
    pca_fit,
    reduce_apply,
    select_lambda,
    soft_threshold,
    standardize_apply,
    standardize_fit,
)


def _kkt_violation(X, y, beta, lam):
    n = X.shape[0]
    grad = X.T @ (y - X @ beta) / n
    zero = beta == 0
    worst = 0.0
    if zero.any():
        worst = max(worst, float(np.max(np.abs(grad[zero]) - lam)))
    if (~zero).any():
        worst = max(worst, float(np.max(np.abs(grad[~zero] - lam * np.sign(beta[~zero])))))
    return worst


def test_standardize_population_std_and_flags():
    X = np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    std = standardize_fit(X)
    np.testing.assert_allclose(std.means, [3.0, 5.0])
    np.testing.assert_allclose(std.stds, [np.sqrt(8 / 3), 1.0])
    assert std.flagged.tolist() == [False, True]
    Z = standardize_apply(std, X)
    np.testing.assert_allclose(Z[:, 0].mean(), 0.0, atol=1e-12)
    np.testing.assert_allclose(Z[:, 0].std(), 1.0)
    assert (Z[:, 1] == 0).all()
    # flagged columns stay 0 even for rows that differ at apply time
    assert standardize_apply(std, [[3.0, 99.0]])[0, 1] == 0.0


def test_standardize_needs_two_rows():
    with pytest.raises(EmptyInputError):
        standardize_fit([[1.0, 2.0]])


def test_standardize_rejects_non_finite_and_wrong_width():
    with pytest.raises(PrognosisError):
        standardize_fit([[1.0, np.nan], [2.0, 3.0]])
    std = standardize_fit([[1.0, 2.0], [2.0, 3.0]])
    with pytest.raises(PrognosisError):
        standardize_apply(std, [[1.0, 2.0, 3.0]])


def test_soft_threshold():
    np.testing.assert_allclose(soft_threshold(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]), 1.0),
                               [-2.0, 0.0, 0.0, 0.0, 2.0])


def test_lasso_matches_closed_form_on_orthonormal_design():
    rng = np.random.default_rng(0)
    n, p = 40, 6
    q, _ = np.linalg.qr(rng.normal(size=(n, p)))
    X = np.sqrt(n) * q  # X^T X = n I
    y = X @ np.array([1.5, -0.8, 0.3, 0.0, 0.05, -2.0]) + 0.1 * rng.normal(size=n)
    lam = 0.2
    model = lasso_fit(X, y, lam=lam)
    expected = soft_threshold(X.T @ y / n, lam)
    np.testing.assert_allclose(model.coef, expected, atol=1e-8)
    np.testing.assert_array_equal(model.selected, np.flatnonzero(expected))


def test_lasso_kkt_on_random_problems():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, p = int(rng.integers(10, 30)), int(rng.integers(3, 15))
        X = rng.normal(size=(n, p))
        y = (rng.random(n) < 0.5).astype(float)
        lam = float(rng.uniform(0.05, 0.8)) * lambda_max(X, y)
        model = lasso_fit(X, y, lam=lam)
        assert _kkt_violation(X, y, model.coef, lam) <= 1e-6


def test_lasso_above_lambda_max_keeps_strongest_column():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 5))
    y = X[:, 3] + 0.01 * rng.normal(size=12)
    model = lasso_fit(X, y, lam=2 * lambda_max(X, y))
    assert (model.coef == 0).all()
    assert model.selected.tolist() == [3]
    assert model.n_outputs == 1


def test_lasso_rejects_negative_lambda_and_bad_labels():
    X = np.eye(3)
    with pytest.raises(ConfigError):
        lasso_fit(X, [0, 1, 0], lam=-1.0)
    with pytest.raises(PrognosisError):
        lasso_fit(X, [0, 1], lam=0.1)


def test_lasso_path_is_sparser_for_larger_lambda():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(30, 8))
    y = X[:, 0] - X[:, 1] + 0.2 * rng.normal(size=30)
    grid = lasso_grid(X, y)
    assert grid[0] > grid[-1]
    path = lasso_path(X, y, grid)
    nnz = (path != 0).sum(axis=1)
    assert nnz[0] <= nnz[-1]
    assert nnz[-1] >= 2


def test_inner_folds_are_stratified():
    y = np.array([0, 1, 0, 1, 0, 1, 0, 1, 0])
    fold = inner_folds(y)
    assert fold.tolist() == [0, 0, 1, 1, 2, 2, 0, 0, 1]
    for f in range(LASSO_INNER_FOLDS):
        assert set(y[fold == f]) == {0, 1}


def test_select_lambda_is_on_the_grid_and_deterministic():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(24, 10))
    y = (X[:, 2] + 0.3 * rng.normal(size=24) > 0).astype(float)
    lam = select_lambda(X, y)
    assert lam in set(lasso_grid(X, y).tolist())
    assert select_lambda(X, y) == lam
    model = lasso_fit(X, y, lam="auto")
    assert model.lam == lam
    assert 2 in model.selected.tolist()


def test_select_lambda_needs_enough_rows():
    with pytest.raises(EmptyInputError):
        select_lambda(np.eye(2), [0, 1])


def test_pca_components_are_orthonormal_and_oriented():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 6)) @ rng.normal(size=(6, 6))
    model = pca_fit(X, n_components=4)
    C = model.components
    np.testing.assert_allclose(C.T @ C, np.eye(4), atol=1e-10)
    for k in range(4):
        assert C[np.argmax(np.abs(C[:, k])), k] > 0
    assert np.all(np.diff(model.explained) <= 1e-12)
    scores = reduce_apply(model, X)
    np.testing.assert_allclose(scores.mean(axis=0), 0.0, atol=1e-10)
    variances = scores.var(axis=0)
    assert np.all(np.diff(variances) <= 1e-10)


def _oriented_svd_components(X, k):
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    V = vt[:k].T
    idx = np.argmax(np.abs(V), axis=0)
    return V * np.sign(V[idx, np.arange(k)])


@pytest.mark.parametrize("shape", [(15, 5), (6, 20)])
def test_pca_matches_svd_in_primal_and_dual_form(shape):
    rng = np.random.default_rng(6)
    X = rng.normal(size=shape)
    k = min(shape[0] - 1, shape[1], 3)
    model = pca_fit(X, n_components=k)
    np.testing.assert_allclose(model.components, _oriented_svd_components(X, k), atol=1e-8)


def test_pca_variance_fraction_picks_smallest_k():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(30, 4)) * np.array([10.0, 3.0, 0.1, 0.1])
    model = pca_fit(X, variance_fraction=0.9)
    assert model.n_outputs == 1 or np.cumsum(model.explained)[-2] < 0.9
    assert np.sum(model.explained) >= 0.9


def test_pca_component_bounds():
    X = np.random.default_rng(8).normal(size=(5, 10))
    with pytest.raises(ConfigError):
        pca_fit(X, n_components=5)
    with pytest.raises(ConfigError):
        pca_fit(X, n_components=0)
    with pytest.raises(EmptyInputError):
        pca_fit(X[:1])


def test_identity_without_standardization_is_passthrough():
    X = np.array([[1.0, 200.0], [2.0, 100.0], [3.0, 50.0]])
    t = fit_reduction("identity", X, [0, 1, 0], standardize=False, fold_id=2)
    assert t.standardizer is None
    assert t.fold_id == 2
    np.testing.assert_array_equal(reduce_apply(t, X), X)


def test_fit_reduction_lasso_then_apply_selects_columns():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 6)) * 50 + 100
    y = (X[:, 4] > 100).astype(float)
    t = fit_reduction("lasso", X, y, lam=0.05, fold_id=0)
    assert t.standardizer is not None
    out = reduce_apply(t, X)
    assert out.shape == (30, t.n_outputs)
    Z = standardize_apply(t.standardizer, X)
    np.testing.assert_allclose(out, Z[:, t.selected])


def test_fit_reduction_rejects_unknown_kind_and_apply_checks_width():
    with pytest.raises(ConfigError):
        fit_reduction("ica", np.eye(3), [0, 1, 0])
    t = fit_reduction("pca", np.random.default_rng(0).normal(size=(6, 3)), [0, 1] * 3, n_components=2)
    with pytest.raises(PrognosisError):
        reduce_apply(t, np.zeros((1, 4)))


def test_transform_dict_roundtrip():
    rng = np.random.default_rng(10)
    X = rng.normal(size=(12, 5))
    t = fit_reduction("pca", X, [0, 1] * 6, n_components=3, fold_id=4)
    back = ReductionTransform.from_dict(json.loads(json.dumps(t.to_dict())))
    assert back.kind == "pca" and back.fold_id == 4
    np.testing.assert_array_equal(reduce_apply(back, X), reduce_apply(t, X))
