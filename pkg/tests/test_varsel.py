import numpy as np
import pytest

from ghicast import dataset as ds
from ghicast import varsel as vs
from ghicast.scoring import mae


def _problem(seed=0, n=120, p=5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    X = (X - X.mean(0)) / X.std(0, ddof=1)
    y = X @ rng.standard_normal(p) + 0.5 * rng.standard_normal(n)
    return X, y - y.mean()


def test_lasso_zero_penalty_is_least_squares():
    X, y = _problem()
    np.testing.assert_allclose(vs.lasso(X, y, 0.0, tol=1e-10), np.linalg.solve(X.T @ X, X.T @ y), atol=1e-6)


def test_lasso_null_threshold():
    X, y = _problem(1)
    lam = np.max(np.abs(X.T @ y)) / len(y)
    assert np.all(vs.lasso(X, y, lam) == 0)
    assert np.all(vs.lasso(X, y, 2 * lam) == 0)
    assert np.any(vs.lasso(X, y, 0.99 * lam) != 0)


def test_lasso_orthonormal_soft_threshold():
    rng = np.random.default_rng(2)
    n = 64
    Q, _ = np.linalg.qr(rng.standard_normal((n, 4)))
    X = Q * np.sqrt(n)          # X'X / n = I
    y = X @ [3.0, -0.2, 0.05, 1.0] + rng.standard_normal(n)
    ols = X.T @ y / n
    for lam in (0.0, 0.1, 0.5, 2.0):
        np.testing.assert_allclose(vs.lasso(X, y, lam), vs.soft_threshold(ols, lam), atol=1e-8)


def test_elastic_net_reductions():
    X, y = _problem(3)
    np.testing.assert_allclose(vs.elastic_net(X, y, 0.05, 1.0), vs.lasso(X, y, 0.05), atol=1e-8)
    lam = 0.3
    ridge = np.linalg.solve(X.T @ X + len(y) * lam * np.eye(X.shape[1]), X.T @ y)
    np.testing.assert_allclose(vs.elastic_net(X, y, lam, 0.0, tol=1e-10), ridge, atol=1e-6)
    np.testing.assert_allclose(vs.elastic_net(X, y, 0.0, 0.5, tol=1e-10),
                               np.linalg.solve(X.T @ X, X.T @ y), atol=1e-6)


def test_path_l1_norm_monotone():
    X, y = _problem(4, p=8)
    lams = vs.lambda_grid(X, y)
    norms = np.abs(vs.path(X, y, lams)).sum(axis=1)
    assert np.all(np.diff(norms) >= -1e-9)


def test_objective_non_increasing_per_sweep():
    X, y = _problem(5, p=8)
    X[:, 1] = X[:, 0] + 0.1 * X[:, 1]
    trace = []
    vs.elastic_net(X, y, 0.01, 0.5, trace=trace)
    assert np.all(np.diff(trace) <= 1e-15)


def test_nonconvergence_reports():
    X, y = _problem(6)
    with pytest.raises(vs.FitError):
        vs.lasso(X, y, 0.01, max_sweeps=1, tol=0.0)


def test_time_folds_contiguous():
    folds = vs.time_folds(23, 5)
    assert max(len(f) for f in folds) - min(len(f) for f in folds) <= 1
    assert np.array_equal(np.concatenate(folds), np.arange(23))


def _frame_with_driver(seed=0, days=40):
    frame = ds.synthetic_frame(days=days, seed=seed)
    rng = np.random.default_rng(seed)
    cov = np.array(frame.covariates)
    for j in range(cov.shape[1]):
        cov[:, j] = rng.standard_normal(len(frame)) * 5 + 20
    j = ds.COVARIATES.index("RH")
    ghi = np.clip(400 - 15 * (cov[:, j] - 20) + 5 * rng.standard_normal(len(frame)), 0, None)
    return frame.with_values(ghi=ghi, covariates=cov)


@pytest.mark.parametrize("method", vs.METHODS)
def test_strong_predictor_selected(method):
    sp = ds.split(_frame_with_driver(), 0.8)
    res = vs.select(method, sp, vs.SelectConfig(gbr=vs.gbr.GbrConfig(n_trees=100)))
    assert "RH" in res.selected
    assert res.mae >= 0


def test_single_candidate_selected():
    sp = ds.split(_frame_with_driver(1, 10), 0.8)
    res = vs.select("lasso", sp, vs.SelectConfig(candidates=("WS",)))
    assert res.selected == ("WS",)


def test_evaluate_intercept_only_constant_target():
    frame = ds.synthetic_frame(days=5)
    frame = frame.with_values(ghi=np.full(len(frame), 250.0))
    assert vs.evaluate((), ds.split(frame, 0.8)) == 0.0


def test_evaluate_linear_truth_below_noise():
    sp = ds.split(_frame_with_driver(2), 0.8)
    value = vs.evaluate(("RH",), sp)
    assert value < 5.0   # noise sd 5, mean absolute noise about 4
    assert value == vs.evaluate(("RH",), sp)


def test_evaluate_matches_manual_lqr():
    sp = ds.split(_frame_with_driver(3), 0.8)
    X = sp.train.column("RH")
    lqr = vs.fit_lqr(X, sp.train.ghi, [0.5])
    manual = mae(sp.test.ghi, lqr.predict(sp.test.column("RH"))[:, 0])
    assert vs.evaluate(("RH",), sp) == pytest.approx(manual, rel=1e-9)


def test_write_results(tmp_path):
    r = vs.SelectionResult("gbr", ("RH", "Temp"), {"RH": 0.9, "Temp": 0.1}, 12.5)
    c, j = vs.write_results([r], tmp_path / "sel.csv", tmp_path / "sel.json")
    assert c.read_text().splitlines() == ["method,MAE,selected", "gbr,12.5,RH;Temp"]
