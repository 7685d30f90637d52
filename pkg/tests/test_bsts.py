import math

import numpy as np
import pytest
from scipy import stats

from ghicast import bsts
from ghicast import dataset as ds
from ghicast.errors import NumericalError


def llt(q=(0.3, 0.05), h=0.7):
    return bsts.StateSpaceSpec.build(level=True, slope=True, seasonal=None, state_noise_var=q, obs_noise_var=h)


def dense_joint(spec, a1, P1, n):
    """Mean and covariance of (alpha_1..alpha_n, y_1..y_n) by explicit linear maps."""
    m, k = spec.state_dim, len(spec.state_noise_var)
    # noise vector: [init (m), eta_1..eta_{n-1} (k each), eps_1..eps_n]
    dim = m + k * (n - 1) + n
    S = np.zeros(dim)
    S[:m] = 1.0
    sd = np.concatenate([np.ones(m), np.tile(np.sqrt(spec.state_noise_var), n - 1),
                         np.full(n, math.sqrt(spec.obs_noise_var))])
    L1 = np.linalg.cholesky(P1)
    maps, means = [], []
    cur = np.zeros((m, dim))
    cur[:, :m] = L1
    mu = np.array(a1, float)
    for t in range(n):
        maps.append(cur.copy())
        means.append(mu.copy())
        if t < n - 1:
            cur = spec.T @ cur
            cur[:, m + k * t: m + k * (t + 1)] += spec.R * np.sqrt(spec.state_noise_var)
            mu = spec.T @ mu
    ymaps = []
    for t in range(n):
        row = spec.Z @ maps[t]
        row = row.copy()
        row[m + k * (n - 1) + t] = math.sqrt(spec.obs_noise_var)
        ymaps.append(row)
    A = np.vstack(maps + [np.vstack(ymaps)])
    mean = np.concatenate(means + [np.array([spec.Z @ mu_t for mu_t in means])])
    return mean, A @ A.T


def condition(mean, cov, obs_idx, values, target_idx):
    Soo = cov[np.ix_(obs_idx, obs_idx)]
    Sto = cov[np.ix_(target_idx, obs_idx)]
    return mean[target_idx] + Sto @ np.linalg.solve(Soo, values - mean[obs_idx])


# --------------------------------------------------------------------------
# Kalman step
# --------------------------------------------------------------------------

def scalar_spec(c, r):
    return bsts.StateSpaceSpec(np.eye(1), [c], np.zeros((1, 1)), [0.0], r)


def test_scalar_gain_example():
    st, _ = bsts.kalman_step(bsts.KalmanState([0.0], [[1.0]]), scalar_spec(1.0, 1.0), 1.0)
    assert st.gain[0] == 0.5
    assert st.filtered_cov[0, 0] == 0.5


def test_noiseless_observation_collapses_variance():
    st, _ = bsts.kalman_step(bsts.KalmanState([0.0], [[1.0]]), scalar_spec(2.0, 0.0), 3.0)
    assert st.gain[0] == 0.5
    assert st.filtered_cov[0, 0] == 0.0
    assert st.filtered_mean[0] == 1.5


def test_nonpositive_innovation_variance_raises():
    with pytest.raises(NumericalError):
        bsts.kalman_step(bsts.KalmanState([0.0], [[0.0]]), scalar_spec(1.0, 0.0), 1.0)


def test_missing_observation_skips_update():
    spec = llt()
    s0 = bsts.KalmanState(np.array([1.0, 0.5]), np.eye(2))
    s1, ll = bsts.kalman_step(s0, spec, float("nan"))
    assert ll == 0.0
    np.testing.assert_array_equal(s1.mean, spec.T @ s0.mean)
    np.testing.assert_allclose(s1.cov, spec.T @ s0.cov @ spec.T.T + spec.RQR)


@pytest.mark.parametrize("n", [1, 3, 5, 8])
def test_filter_matches_dense_joint_gaussian(n):
    rng = np.random.default_rng(n)
    spec = llt()
    a1, P1 = np.array([0.4, -0.1]), np.array([[2.0, 0.3], [0.3, 0.5]])
    y = rng.normal(size=n) * 2
    filt, ll = bsts.kalman_filter(y, spec, a1, P1)
    mean, cov = dense_joint(spec, a1, P1, n)
    m = spec.state_dim
    yidx = np.arange(n * m, n * m + n)
    ref_ll = stats.multivariate_normal(mean[yidx], cov[np.ix_(yidx, yidx)]).logpdf(y)
    assert ll == pytest.approx(ref_ll, rel=1e-8)
    for t in range(n):
        ref = condition(mean, cov, yidx[: t + 1], y[: t + 1], np.arange(t * m, (t + 1) * m))
        np.testing.assert_allclose(filt[t], ref, rtol=1e-8, atol=1e-10)


def test_filter_with_gap_matches_dense_conditioning():
    rng = np.random.default_rng(7)
    spec = llt()
    a1, P1 = np.zeros(2), np.eye(2) * 3
    n = 6
    y = rng.normal(size=n)
    y[2] = np.nan
    filt, ll = bsts.kalman_filter(y, spec, a1, P1)
    mean, cov = dense_joint(spec, a1, P1, n)
    m = spec.state_dim
    seen = np.flatnonzero(np.isfinite(y))
    yidx = n * m + seen
    assert ll == pytest.approx(stats.multivariate_normal(mean[yidx], cov[np.ix_(yidx, yidx)]).logpdf(y[seen]),
                               rel=1e-8)
    ref = condition(mean, cov, yidx, y[seen], np.arange((n - 1) * m, n * m))
    np.testing.assert_allclose(filt[-1], ref, rtol=1e-8)


def test_regression_offset_enters_innovation():
    spec = llt()
    s0 = bsts.KalmanState(np.zeros(2), np.eye(2))
    a, la = bsts.kalman_step(s0, spec, 5.0, np.array([1.0, 2.0]), np.array([0.5, 1.0]))
    b, lb = bsts.kalman_step(s0, spec, 2.5)
    np.testing.assert_allclose(a.mean, b.mean)
    assert la == lb


def test_compiled_filter_agrees_with_reference_filter():
    rng = np.random.default_rng(3)
    spec = bsts.StateSpaceSpec.build(state_noise_var=[0.2, 0.01, 0.05], obs_noise_var=1.3)
    y = np.cumsum(rng.normal(size=200)) + 3 * np.sin(np.arange(200) * 2 * np.pi / 24)
    y[[10, 11, 50]] = np.nan
    a0, P0 = np.zeros(spec.state_dim), np.eye(spec.state_dim) * 5
    _, ll = bsts.kalman_filter(y, spec, a0, P0)
    ll2, _, _ = bsts.filter_loglik(y, spec, a0, P0)
    assert ll2 == pytest.approx(ll, rel=1e-10)


def test_covariance_stays_symmetric_psd():
    rng = np.random.default_rng(11)
    spec = llt(q=(1e-3, 1e-6), h=1e-4)
    st = bsts.KalmanState(np.zeros(2), np.eye(2) * 1e4)
    worst = 0.0
    for t in range(100_000):
        obs = float("nan") if t % 97 == 0 else rng.normal() * 10
        st, _ = bsts.kalman_step(st, spec, obs)
        if t % 1000 == 0:
            assert np.array_equal(st.cov, st.cov.T)
        worst = min(worst, float(np.linalg.eigvalsh(st.filtered_cov).min()))
    assert worst >= -1e-10


def test_spec_dimensions_and_seasonal_structure():
    spec = bsts.StateSpaceSpec.build()
    assert spec.state_dim == 25
    assert spec.components == ("level", "slope", "seasonal24")
    # the seasonal dummies sum to zero over a full cycle without noise
    s = np.zeros(23)
    s[:] = np.arange(23) - 11.0
    x = np.concatenate([[0.0, 0.0], s])
    vals = []
    for _ in range(48):
        vals.append(x[2])
        x = spec.T @ x
    assert sum(vals[:24]) == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(vals[:24], vals[24:])
    with pytest.raises(ValueError):
        bsts.StateSpaceSpec(np.eye(2), [1.0], np.eye(1), [1.0], 1.0)
    with pytest.raises(ValueError):
        bsts.StateSpaceSpec(np.eye(1), [1.0], np.eye(1), [-1.0], 1.0)


# --------------------------------------------------------------------------
# Simulation smoother
# --------------------------------------------------------------------------

def test_simulation_smoother_matches_dense_posterior():
    rng = np.random.default_rng(5)
    spec = llt(q=(0.5, 0.1), h=0.4)
    n, m = 6, 2
    a1, P1 = np.array([1.0, 0.0]), np.eye(2) * 2
    y = np.array([1.2, 1.9, np.nan, 3.1, 3.3, 4.8])
    mean, cov = dense_joint(spec, a1, P1, n)
    seen = np.flatnonzero(np.isfinite(y))
    yidx = n * m + seen
    sidx = np.arange(n * m)
    ref_mean = condition(mean, cov, yidx, y[seen], sidx)
    Soo = cov[np.ix_(yidx, yidx)]
    Sso = cov[np.ix_(sidx, yidx)]
    ref_cov = cov[np.ix_(sidx, sidx)] - Sso @ np.linalg.solve(Soo, Sso.T)
    draws = np.array([bsts.simulation_smoother(y, spec, a1, P1, rng).reshape(-1) for _ in range(8000)])
    se = np.sqrt(np.diag(ref_cov) / len(draws))
    assert np.all(np.abs(draws.mean(0) - ref_mean) < 4 * se)
    np.testing.assert_allclose(draws.var(0), np.diag(ref_cov), rtol=0.08)


# --------------------------------------------------------------------------
# Spike and slab
# --------------------------------------------------------------------------

def slab_problem(seed=0, n=60, strong=1.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    y = strong * X[:, 0] + rng.normal(size=n)
    return X, y


def test_spike_only_prior_gives_zero_effects():
    X, y = slab_problem()
    prior = bsts.SpikeSlabPrior.default(X, y, inclusion=0.0)
    d, b, s2 = bsts.spike_slab_draw(X, y, prior, np.random.default_rng(0))
    assert not d.any()
    assert np.all(b == 0)
    assert s2 > 0


def test_full_inclusion_matches_conjugate_posterior_mean():
    X, y = slab_problem(1)
    prior = bsts.SpikeSlabPrior.default(X, y, inclusion=1.0)
    Om, nu, ss0 = prior.slab_precision, prior.sigma_df, prior.sigma_ss
    post_mean = np.linalg.solve(X.T @ X + Om, X.T @ y)
    rng = np.random.default_rng(2)
    B = np.array([bsts.spike_slab_draw(X, y, prior, rng)[1] for _ in range(4000)])
    se = B.std(0) / math.sqrt(len(B))
    assert np.all(np.abs(B.mean(0) - post_mean) < 3 * se)
    # posterior covariance of the multivariate t
    nn = len(y)
    ss = ss0 + y @ y - post_mean @ (X.T @ X + Om) @ post_mean
    cov = ss / (nu + nn - 2) * np.linalg.inv(X.T @ X + Om)
    np.testing.assert_allclose(B.var(0), np.diag(cov), rtol=0.1)


def mvt_log_marginal(X, y, prior, delta):
    idx = np.flatnonzero(delta)
    nu, ss0 = prior.sigma_df, prior.sigma_ss
    C = np.eye(len(y))
    loc = np.zeros(len(y))
    if len(idx):
        Xs = X[:, idx]
        C = C + Xs @ np.linalg.inv(prior.slab_precision[np.ix_(idx, idx)]) @ Xs.T
        loc = Xs @ prior.slab_mean[idx]
    return stats.multivariate_t(loc, ss0 / nu * C, df=nu).logpdf(y)


def all_models(p):
    return [np.array([(i >> j) & 1 for j in range(p)], bool) for i in range(2 ** p)]


def test_collapsed_marginal_matches_multivariate_t():
    X, y = slab_problem(3, n=25)
    prior = bsts.SpikeSlabPrior.default(X, y)
    models = all_models(3)
    ours = np.array([bsts.log_marginal(X, y, prior, d) for d in models])
    ref = np.array([mvt_log_marginal(X, y, prior, d) for d in models])
    np.testing.assert_allclose(ours - ours[0], ref - ref[0], rtol=1e-9, atol=1e-9)


def batch_se(x, batches=50):
    x = np.asarray(x, float)
    b = len(x) // batches
    means = x[: b * batches].reshape(batches, b).mean(1)
    return means.std(ddof=1) / math.sqrt(batches)


def test_inclusion_frequencies_match_enumeration():
    X, y = slab_problem(4, n=40, strong=0.8)
    prior = bsts.SpikeSlabPrior.default(X, y)
    models = all_models(3)
    lp = np.array([mvt_log_marginal(X, y, prior, d) for d in models]) + np.log(0.5) * 3
    post = np.exp(lp - lp.max())
    post /= post.sum()
    exact = np.array([sum(p for p, d in zip(post, models) if d[j]) for j in range(3)])
    rng = np.random.default_rng(0)
    d = None
    D = np.empty((20_000, 3))
    for i in range(len(D)):
        d, b, _ = bsts.spike_slab_draw(X, y, prior, rng, d)
        D[i] = d
        assert np.all(b[~d] == 0)
    freq = D.mean(0)
    assert freq[0] > 0.9 and np.all(freq[1:] < 0.5)
    for j in range(3):
        assert abs(freq[j] - exact[j]) < 3 * max(batch_se(D[:, j]), 1e-3)


def test_prior_validation():
    with pytest.raises(ValueError):
        bsts.SpikeSlabPrior([1.5], [0.0], [[1.0]])
    with pytest.raises(ValueError):
        bsts.SpikeSlabPrior([0.5, 0.5], [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
    X, y = slab_problem()
    with pytest.raises(ValueError):
        bsts.spike_slab_draw(X[:, :2], y, bsts.SpikeSlabPrior.default(X, y), np.random.default_rng(0))


# --------------------------------------------------------------------------
# Fit and forecast
# --------------------------------------------------------------------------

def test_local_level_variance_is_recovered():
    rng = np.random.default_rng(0)
    n, q = 500, 0.5
    y = np.cumsum(rng.normal(0, math.sqrt(q), n)) + rng.normal(0, 1, n)
    spec = bsts.StateSpaceSpec.build(level=True, slope=False, seasonal=None)
    model = bsts.fit_arrays(y, None, spec, cfg=bsts.McmcConfig(seed=0))
    assert model.n_draws == 1500
    assert abs(model.state_var[:, 0].mean() / q - 1) < 0.5


def test_static_level_reduces_to_conjugate_regression():
    rng = np.random.default_rng(1)
    n = 200
    x = rng.normal(size=(n, 1))
    y = 4.0 + 2.5 * x[:, 0] + rng.normal(0, 0.8, n)
    spec = bsts.StateSpaceSpec.build(level=True, slope=False, seasonal=None, state_noise_var=[0.0])
    prior = bsts.SpikeSlabPrior.default(x, y, inclusion=1.0)
    cfg = bsts.McmcConfig(iters=2500, burn_in=500, sample_state_variances=False, seed=3)
    model = bsts.fit_arrays(y, x, spec, prior, cfg, a0=[0.0], P0=[[1e10]])
    xc, yc = x - x.mean(0), y - y.mean()
    closed = np.linalg.solve(xc.T @ xc + prior.slab_precision, xc.T @ yc)[0]
    b = model.beta[:, 0]
    assert abs(b.mean() - closed) < 3 * batch_se(b, 40)


def test_fit_is_deterministic_and_respects_support():
    rng = np.random.default_rng(2)
    n = 150
    X = rng.normal(size=(n, 3))
    y = np.cumsum(rng.normal(0, 0.3, n)) + 2 * X[:, 0] + rng.normal(size=n)
    spec = bsts.StateSpaceSpec.build(level=True, slope=True, seasonal=None)
    cfg = bsts.McmcConfig(iters=200, burn_in=50, seed=9)
    a = bsts.fit_arrays(y, X, spec, cfg=cfg)
    b = bsts.fit_arrays(y, X, spec, cfg=cfg)
    for f in ("beta", "delta", "obs_var", "state_var", "final_state"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert np.all(a.beta[~a.delta] == 0)
    assert a.delta[:, 0].mean() > 0.9


def test_iters_must_exceed_burn_in():
    spec = bsts.StateSpaceSpec.build(level=True, slope=False, seasonal=None)
    with pytest.raises(ValueError):
        bsts.fit_arrays(np.zeros(10), None, spec, cfg=bsts.McmcConfig(iters=10, burn_in=10))


def manual_model(spec, beta, final_state, obs_var=0.3, state_var=None):
    D = len(final_state)
    p = np.asarray(beta).shape[1]
    sv = np.zeros((D, len(spec.state_noise_var))) if state_var is None else np.asarray(state_var, float)
    return bsts.BstsModel(spec, bsts.SpikeSlabPrior(np.full(p, 0.5), np.zeros(p), np.eye(p)),
                          tuple(f"x{j}" for j in range(p)), np.asarray(beta, float),
                          np.asarray(beta) != 0, np.full(D, obs_var), sv, np.asarray(final_state, float),
                          bsts.McmcConfig())


def test_deterministic_one_step_forecast():
    spec = bsts.StateSpaceSpec.build(level=True, slope=False, seasonal=None, state_noise_var=[0.0])
    model = manual_model(spec, [[1.5, -2.0]], [[10.0]])
    x = np.array([[0.2, 0.7]])
    fc = bsts.forecast(model, 1, x)
    assert fc.mean[0] == 10.0 + 1.5 * 0.2 - 2.0 * 0.7
    assert fc.variance[0] == pytest.approx(0.3)


def test_forecast_shape_and_random_walk_variance_growth():
    spec = bsts.StateSpaceSpec.build(level=True, slope=False, seasonal=None)
    model = manual_model(spec, np.zeros((3, 1)), [[1.0], [2.0], [3.0]], obs_var=0.5,
                         state_var=[[0.1], [0.2], [0.3]])
    fc = bsts.forecast(model, 48, np.zeros((48, 1)))
    assert fc.means.shape == (3, 48)
    h = np.arange(1, 49)
    for i, q in enumerate((0.1, 0.2, 0.3)):
        np.testing.assert_allclose(fc.variances[i], 0.5 + q * h, rtol=1e-12)
    assert np.all(np.diff(fc.variance) >= 0)
    assert fc.quantiles([0.05, 0.5, 0.95]).shape == (48, 3)
    with pytest.raises(ValueError):
        bsts.forecast(model, 0, np.zeros((0, 1)))
    with pytest.raises(ValueError):
        bsts.forecast(model, 3, np.zeros((2, 1)))


def test_rolling_moments_do_not_use_future_observations():
    rng = np.random.default_rng(4)
    spec = bsts.StateSpaceSpec.build(level=True, slope=True, seasonal=24)
    y = 10 + np.sin(np.arange(400) * 2 * np.pi / 24) * 5 + rng.normal(size=400)
    model = bsts.fit_arrays(y[:300], None, spec, cfg=bsts.McmcConfig(iters=60, burn_in=20, seed=1))
    fut = y[300:]
    start = np.zeros(100, bool)
    start[::48] = True
    base = bsts.rolling_moments(model, None, fut, start, 48)
    for origin in (0, 48, 96):
        perturbed = fut.copy()
        perturbed[origin:] = rng.normal(size=100 - origin) * 100
        alt = bsts.rolling_moments(model, None, perturbed, start, 48)
        stop = min(origin + 48, 100)
        np.testing.assert_array_equal(base.means[:, origin:stop], alt.means[:, origin:stop])
        np.testing.assert_array_equal(base.variances[:, origin:stop], alt.variances[:, origin:stop])


def test_fit_on_frame_with_window_and_roundtrip(tmp_path):
    frame = ds.synthetic_frame(days=6, seed=1)
    model = bsts.fit(frame, ("Temp", "RH"), mcmc=bsts.McmcConfig(iters=40, burn_in=10, seed=2), window_hours=72)
    assert model.card["n_train"] == 72
    assert model.features == ("Temp", "RH")
    assert np.all(model.beta[~model.delta] == 0)
    bsts.save_model(model, tmp_path / "m")
    back = bsts.load_model(tmp_path / "m")
    for f in ("beta", "delta", "obs_var", "state_var", "final_state"):
        np.testing.assert_array_equal(getattr(back, f), getattr(model, f))
    assert back.spec.to_dict() == model.spec.to_dict()
    assert back.scaler == model.scaler
    header = (tmp_path / "m" / "draws.csv").read_text().splitlines()[0]
    assert header == "draw,parameter,value"


# --------------------------------------------------------------------------
# Model averaging
# --------------------------------------------------------------------------

def test_bma_trivial_weights():
    np.testing.assert_allclose(bsts.bma_weights([-3.0, -3.0], [0.5, 0.5]), [0.5, 0.5])
    np.testing.assert_allclose(bsts.bma_weights([math.log(3), 0.0], [0.5, 0.5]), [0.75, 0.25], rtol=1e-15)


def test_bma_weights_match_closed_form_evidence():
    rng = np.random.default_rng(6)
    n = 12
    y = rng.normal(size=n) + 1
    designs = [np.ones((n, 1)), np.column_stack([np.ones(n), np.arange(n) / n]), rng.normal(size=(n, 2))]
    priors = np.array([0.5, 0.3, 0.2])
    lm, ref = [], []
    for X in designs:
        S = np.eye(X.shape[1]) * 2.0
        lm.append(bsts.gaussian_log_marginal(y, X, np.zeros(X.shape[1]), S, 0.5))
        ref.append(stats.multivariate_normal(np.zeros(n), X @ S @ X.T + 0.5 * np.eye(n)).logpdf(y))
    np.testing.assert_allclose(lm, ref, rtol=1e-12)
    r = np.exp(np.array(ref) - max(ref)) * priors
    np.testing.assert_allclose(bsts.bma_weights(lm, priors), r / r.sum(), rtol=1e-12, atol=1e-15)


def test_bma_weights_shift_invariance_and_errors():
    rng = np.random.default_rng(8)
    for _ in range(50):
        lm = rng.normal(size=4) * 50
        pr = rng.dirichlet(np.ones(4))
        np.testing.assert_allclose(bsts.bma_weights(lm, pr), bsts.bma_weights(lm + rng.normal() * 1e3, pr),
                                   atol=1e-12)
    with pytest.raises(NumericalError):
        bsts.bma_weights([-np.inf, -np.inf], [0.5, 0.5])
    with pytest.raises(ValueError):
        bsts.bma_weights([0.0, 0.0], [0.5, 0.6])


def test_bma_predict_mixture():
    a = bsts.MixtureForecast(np.array([[100.0, 110.0]]), np.array([[4.0, 9.0]]), np.array([1.0]))
    b = bsts.MixtureForecast(np.array([[200.0, 190.0]]), np.array([[1.0, 1.0]]), np.array([1.0]))
    one = bsts.bma_predict([a], [1.0])
    np.testing.assert_array_equal(one.mean, a.mean)
    np.testing.assert_array_equal(one.variance, a.variance)
    np.testing.assert_allclose(bsts.bma_predict([a, b], [0.5, 0.5]).mean, [150.0, 150.0])
    with pytest.raises(ValueError):
        bsts.bma_predict([a, b], [1.0])
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = rng.integers(1, 5)
        comps = [bsts.MixtureForecast(rng.normal(size=(1, 3)) * 10, rng.uniform(0.1, 5, (1, 3)), np.ones(1))
                 for _ in range(k)]
        mix = bsts.bma_predict(comps, rng.dirichlet(np.ones(k)))
        assert np.all(mix.variance >= np.min([c.variances[0] for c in comps], axis=0) - 1e-12)


def test_mixture_quantiles_single_gaussian():
    q = bsts.mixture_quantiles(np.array([[3.0]]), np.array([[2.0]]), [1.0], [0.05, 0.5, 0.9])
    np.testing.assert_allclose(q[0], stats.norm(3, 2).ppf([0.05, 0.5, 0.9]), atol=1e-9)
