"""Bayesian structural time series with spike-and-slab regression.

Observation and state equations::

    y_t = Z a_t + x_t' beta + e_t,      e_t ~ N(0, H)
    a_{t+1} = T a_t + R n_t,            n_t ~ N(0, diag(q))

Posterior sampling alternates three blocks: the state path given everything
else (simulation smoother built on the Kalman filter), the state disturbance
variances given the path (inverse gamma), and the regression given the
state-adjusted targets (collapsed spike-and-slab Gibbs sweep with a
normal-inverse-gamma slab).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy import special

from . import dataset as ds
from .errors import FitError, NumericalError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# State space specification
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StateSpaceSpec:
    T: np.ndarray
    Z: np.ndarray
    R: np.ndarray
    state_noise_var: np.ndarray
    obs_noise_var: float
    components: tuple = ()

    def __post_init__(self):
        T = np.atleast_2d(np.asarray(self.T, float))
        Z = np.asarray(self.Z, float).reshape(-1)
        R = np.asarray(self.R, float).reshape(len(Z), -1)
        q = np.asarray(self.state_noise_var, float).reshape(-1)
        m = len(Z)
        if T.shape != (m, m):
            raise ValueError(f"transition is {T.shape}, expected {(m, m)}")
        if R.shape[1] != len(q):
            raise ValueError("selection matrix columns must match the disturbance count")
        if np.any(q < 0) or self.obs_noise_var < 0:
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "state_noise_var", q)
        object.__setattr__(self, "obs_noise_var", float(self.obs_noise_var))

    @property
    def state_dim(self):
        return len(self.Z)

    @property
    def RQR(self):
        return (self.R * self.state_noise_var) @ self.R.T

    def with_variances(self, state_noise_var=None, obs_noise_var=None):
        return StateSpaceSpec(self.T, self.Z, self.R,
                              self.state_noise_var if state_noise_var is None else state_noise_var,
                              self.obs_noise_var if obs_noise_var is None else obs_noise_var,
                              self.components)

    @classmethod
    def build(cls, level=True, slope=True, seasonal: int | None = 24, state_noise_var=None,
              obs_noise_var=1.0):
        """Local level or local linear trend, optionally plus a dummy seasonal of the given period."""
        blocks, comps = [], []
        if level:
            if slope:
                blocks.append((np.array([[1.0, 1.0], [0.0, 1.0]]), np.array([1.0, 0.0]), np.eye(2)))
                comps += ["level", "slope"]
            else:
                blocks.append((np.eye(1), np.ones(1), np.eye(1)))
                comps.append("level")
        if seasonal:
            s = seasonal - 1
            Ts = np.zeros((s, s))
            Ts[0, :] = -1.0
            Ts[1:, :-1] = np.eye(s - 1)
            Rs = np.zeros((s, 1))
            Rs[0, 0] = 1.0
            Zs = np.zeros(s)
            Zs[0] = 1.0
            blocks.append((Ts, Zs, Rs))
            comps.append(f"seasonal{seasonal}")
        if not blocks:
            raise ValueError("state space needs at least one component")
        m = sum(len(b[1]) for b in blocks)
        k = sum(b[2].shape[1] for b in blocks)
        T, R, Z = np.zeros((m, m)), np.zeros((m, k)), np.zeros(m)
        i = j = 0
        for Tb, Zb, Rb in blocks:
            mb, kb = len(Zb), Rb.shape[1]
            T[i:i + mb, i:i + mb] = Tb
            Z[i:i + mb] = Zb
            R[i:i + mb, j:j + kb] = Rb
            i, j = i + mb, j + kb
        q = np.ones(k) if state_noise_var is None else state_noise_var
        return cls(T, Z, R, q, obs_noise_var, tuple(comps))

    def to_dict(self):
        return {"T": self.T.tolist(), "Z": self.Z.tolist(), "R": self.R.tolist(),
                "state_noise_var": self.state_noise_var.tolist(), "obs_noise_var": self.obs_noise_var,
                "components": list(self.components)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["T"]), np.array(d["Z"]), np.array(d["R"]), np.array(d["state_noise_var"]),
                   d["obs_noise_var"], tuple(d["components"]))


@dataclass(frozen=True)
class KalmanState:
    """Predicted moments for the next step plus diagnostics of the last update."""

    mean: np.ndarray
    cov: np.ndarray
    gain: np.ndarray | None = None
    innovation: float = float("nan")
    innovation_var: float = float("nan")
    filtered_mean: np.ndarray | None = None
    filtered_cov: np.ndarray | None = None


def kalman_step(state: KalmanState, spec: StateSpaceSpec, observation, regressors=None, beta=None):
    """One update-then-predict cycle; returns ``(next_state, loglik_increment)``.

    A missing (NaN) observation skips the update and contributes nothing to
    the log-likelihood.
    """
    a, P = np.asarray(state.mean, float), np.asarray(state.cov, float)
    Z = spec.Z
    offset = 0.0
    if regressors is not None and beta is not None and len(beta):
        offset = float(np.dot(regressors, beta))
    if observation is None or not np.isfinite(observation):
        af, Pf, K, v, F, ll = a, P, np.zeros_like(a), float("nan"), float("nan"), 0.0
    else:
        v = float(observation) - offset - float(Z @ a)
        PZ = P @ Z
        F = float(Z @ PZ) + spec.obs_noise_var
        if not F > 0:
            raise NumericalError(f"innovation variance {F} is not positive")
        K = PZ / F
        af = a + K * v
        Pf = P - np.outer(K, PZ)
        Pf = 0.5 * (Pf + Pf.T)
        ll = -0.5 * (LOG_2PI + math.log(F) + v * v / F)
    an = spec.T @ af
    Pn = spec.T @ Pf @ spec.T.T + spec.RQR
    Pn = 0.5 * (Pn + Pn.T)
    return KalmanState(an, Pn, K, v, F, af, Pf), ll


def kalman_filter(y, spec: StateSpaceSpec, a0, P0, X=None, beta=None):
    """Run ``kalman_step`` over a series; returns (filtered means, log-likelihood)."""
    state = KalmanState(np.asarray(a0, float), np.asarray(P0, float))
    means, total = [], 0.0
    for t, obs in enumerate(np.asarray(y, float)):
        state, ll = kalman_step(state, spec, obs, None if X is None else X[t], beta)
        means.append(state.filtered_mean)
        total += ll
    return np.array(means), total


# --------------------------------------------------------------------------
# Compiled filter / smoother
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _tvec(tr, tc, tv, x):
    out = np.zeros(len(x))
    for e in range(len(tv)):
        out[tr[e]] += tv[e] * x[tc[e]]
    return out


@numba.njit(cache=True)
def _tpt(tr, tc, tv, P):
    """Sparse ``T P T'``."""
    m = P.shape[0]
    TP = np.zeros((m, m))
    for e in range(len(tv)):
        i, j, w = tr[e], tc[e], tv[e]
        for k in range(m):
            TP[i, k] += w * P[j, k]
    out = np.zeros((m, m))
    for e in range(len(tv)):
        i, j, w = tr[e], tc[e], tv[e]
        for k in range(m):
            out[k, i] += w * TP[k, j]
    return out


def _sparse(T):
    r, c = np.nonzero(T)
    return r.astype(np.int64), c.astype(np.int64), T[r, c].astype(float)


@numba.njit(cache=True)
def _filter_sparse(y, tr, tc, tv, Z, RQR, H, a0, P0):
    n, m = len(y), len(a0)
    A = np.empty((n, m))
    Ps = np.empty((n, m, m))
    K = np.zeros((n, m))
    V = np.zeros(n)
    F = np.ones(n)
    a = a0.copy()
    P = P0.copy()
    ll = 0.0
    steady = False
    for t in range(n):
        A[t] = a
        Ps[t] = P
        if np.isnan(y[t]):
            a = _tvec(tr, tc, tv, a)
            P = _tpt(tr, tc, tv, P) + RQR
            steady = False
            continue
        M = P @ Z
        f = Z @ M + H
        if f <= 0:
            return A, Ps, K, V, F, np.nan
        v = y[t] - Z @ a
        V[t] = v
        F[t] = f
        ll += -0.5 * (np.log(2 * np.pi) + np.log(f) + v * v / f)
        TM = _tvec(tr, tc, tv, M)
        K[t] = TM / f
        a = _tvec(tr, tc, tv, a) + K[t] * v
        if not steady:
            Pn = _tpt(tr, tc, tv, P) + RQR - np.outer(TM, TM) / f
            Pn = 0.5 * (Pn + Pn.T)
            scale = max(1.0, np.max(np.abs(Pn)))
            if np.max(np.abs(Pn - P)) <= 1e-13 * scale:
                steady = True
            P = Pn
    return A, Ps, K, V, F, ll


def _filter(y, T, Z, RQR, H, a0, P0):
    tr, tc, tv = _sparse(T)
    return _filter_sparse(y, tr, tc, tv, Z, RQR, float(H), a0, P0)


@numba.njit(cache=True)
def _smooth_mean(y, T, Z, A, Ps, K, V, F):
    n, m = A.shape
    out = np.empty((n, m))
    r = np.zeros(m)
    for t in range(n - 1, -1, -1):
        if np.isnan(y[t]):
            r = T.T @ r
        else:
            # r_{t-1} = Z v/F + (T - K Z)' r
            kr = K[t] @ r
            r = Z * (V[t] / F[t]) + T.T @ r - Z * kr
        out[t] = A[t] + Ps[t] @ r
    return out


@numba.njit(cache=True)
def _simulate(n, T, Z, R, qsd, hsd, P0chol, eps_state, eps_init, eps_obs):
    m = T.shape[0]
    alpha = np.empty((n, m))
    y = np.empty(n)
    a = P0chol @ eps_init
    for t in range(n):
        alpha[t] = a
        y[t] = Z @ a + hsd * eps_obs[t]
        a = T @ a + R @ (qsd * eps_state[t])
    return alpha, y


def _chol_psd(P):
    P = 0.5 * (P + P.T)
    scale = max(float(np.max(np.abs(np.diag(P)))), 1e-300)
    for k in range(8):
        jitter = 0.0 if k == 0 else scale * 10.0 ** (k - 14)
        try:
            return np.linalg.cholesky(P + jitter * np.eye(len(P)))
        except np.linalg.LinAlgError:
            continue
    w, U = np.linalg.eigh(P)
    return U * np.sqrt(np.clip(w, 0, None))


def simulation_smoother(y, spec: StateSpaceSpec, a0, P0, rng):
    """Draw a state path from p(alpha | y) (Durbin-Koopman mean-correction form)."""
    y = np.asarray(y, float)
    n, m = len(y), spec.state_dim
    k = len(spec.state_noise_var)
    plus_a, plus_y = _simulate(n, spec.T, spec.Z, spec.R, np.sqrt(spec.state_noise_var),
                               math.sqrt(spec.obs_noise_var), _chol_psd(P0),
                               rng.standard_normal((n, k)), rng.standard_normal(m), rng.standard_normal(n))
    ystar = y - plus_y
    A, Ps, K, V, F, ll = _filter(ystar, spec.T, spec.Z, spec.RQR, spec.obs_noise_var,
                                 np.asarray(a0, float), np.asarray(P0, float))
    if not np.isfinite(ll):
        raise NumericalError("non-positive innovation variance in the simulation smoother")
    return plus_a + _smooth_mean(ystar, spec.T, spec.Z, A, Ps, K, V, F)


def filter_loglik(y, spec: StateSpaceSpec, a0, P0):
    """Compiled-filter log-likelihood and predicted means (matches ``kalman_filter``)."""
    A, Ps, K, V, F, ll = _filter(np.asarray(y, float), spec.T, spec.Z, spec.RQR, spec.obs_noise_var,
                                 np.asarray(a0, float), np.asarray(P0, float))
    return ll, A, Ps


# --------------------------------------------------------------------------
# Spike and slab regression
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpikeSlabPrior:
    inclusion_prob: np.ndarray
    slab_mean: np.ndarray
    slab_precision: np.ndarray
    sigma_df: float = 0.01
    sigma_ss: float = 0.01

    def __post_init__(self):
        pi = np.asarray(self.inclusion_prob, float).reshape(-1)
        b = np.asarray(self.slab_mean, float).reshape(-1)
        Om = np.atleast_2d(np.asarray(self.slab_precision, float))
        p = len(pi)
        if np.any((pi < 0) | (pi > 1)):
            raise ValueError("inclusion probabilities must lie in [0, 1]")
        if b.shape != (p,) or (p and Om.shape != (p, p)):
            raise ValueError("slab mean / precision dimensions disagree with inclusion vector")
        if p and np.any(np.linalg.eigvalsh(0.5 * (Om + Om.T)) <= 0):
            raise ValueError("slab precision must be positive definite")
        if self.sigma_df <= 0 or self.sigma_ss <= 0:
            raise ValueError("residual variance prior needs positive df and sum of squares")
        object.__setattr__(self, "inclusion_prob", pi)
        object.__setattr__(self, "slab_mean", b)
        object.__setattr__(self, "slab_precision", Om.reshape(p, p))

    @property
    def dim(self):
        return len(self.inclusion_prob)

    @classmethod
    def default(cls, X, y, expected_r2=0.5, prior_df=0.01, information_weight=0.01,
                diagonal_shrinkage=0.5, inclusion=0.5):
        X = np.asarray(X, float)
        n, p = X.shape
        XtX = X.T @ X
        Om = information_weight * ((1 - diagonal_shrinkage) * XtX + diagonal_shrinkage * np.diag(np.diag(XtX))) / n
        if p and np.any(np.diag(Om) <= 0):
            Om = Om + np.eye(p) * information_weight
        vy = float(np.var(y)) or 1.0
        return cls(np.full(p, inclusion), np.zeros(p), Om, prior_df, prior_df * (1 - expected_r2) * vy)

    def to_dict(self):
        return {"inclusion_prob": self.inclusion_prob.tolist(), "slab_mean": self.slab_mean.tolist(),
                "slab_precision": self.slab_precision.tolist(), "sigma_df": self.sigma_df,
                "sigma_ss": self.sigma_ss}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["inclusion_prob"]), np.array(d["slab_mean"]), np.array(d["slab_precision"]),
                   d["sigma_df"], d["sigma_ss"])


def _subset_posterior(XtX, Xty, yty, n, prior, idx):
    """Normal-inverse-gamma posterior on a support; returns (log marginal kernel, mean, factor, ss)."""
    nu, ss0 = prior.sigma_df, prior.sigma_ss
    if len(idx) == 0:
        return -0.5 * (nu + n) * math.log(ss0 + yty), np.zeros(0), None, ss0 + yty
    Om = prior.slab_precision[np.ix_(idx, idx)]
    b0 = prior.slab_mean[idx]
    Prec = Om + XtX[np.ix_(idx, idx)]
    L = None
    scale = float(np.mean(np.diag(Prec)))
    for k in range(6):
        try:
            L = np.linalg.cholesky(Prec + (0.0 if k == 0 else scale * 10.0 ** (k - 12)) * np.eye(len(idx)))
            break
        except np.linalg.LinAlgError:
            continue
    if L is None:
        raise NumericalError("on-support posterior precision is singular")
    Lo = np.linalg.cholesky(Om)
    rhs = Xty[idx] + Om @ b0
    w = np.linalg.solve(L, rhs)
    mean = np.linalg.solve(L.T, w)
    ss = ss0 + yty + b0 @ Om @ b0 - w @ w
    ss = max(ss, 1e-300)
    logdet = np.log(np.diag(Lo)).sum() - np.log(np.diag(L)).sum()
    return float(logdet - 0.5 * (nu + n) * math.log(ss)), mean, L, ss


def log_marginal(design, targets, prior: SpikeSlabPrior, delta) -> float:
    """Log p(targets | delta) up to a delta-free constant."""
    X = np.asarray(design, float)
    y = np.asarray(targets, float)
    idx = np.flatnonzero(np.asarray(delta, bool))
    return _subset_posterior(X.T @ X, X.T @ y, float(y @ y), len(y), prior, idx)[0]


def _log_prior_delta(pi, delta):
    with np.errstate(divide="ignore"):
        return float(np.sum(np.where(delta, np.log(pi), np.log1p(-pi))))


def spike_slab_draw(design, targets, prior: SpikeSlabPrior, rng, delta=None, stats=None):
    """One Gibbs pass: each inclusion indicator from its collapsed conditional, then
    the residual variance and the on-support effects.

    Returns ``(delta, beta, sigma2)``; ``beta`` is exactly zero off the support.
    """
    X = np.asarray(design, float)
    y = np.asarray(targets, float)
    n, p = X.shape
    if p != prior.dim:
        raise ValueError(f"design has {p} columns, prior has {prior.dim}")
    XtX, Xty, yty = stats if stats is not None else (X.T @ X, X.T @ y, float(y @ y))
    pi = prior.inclusion_prob
    d = (pi >= 0.5) if delta is None else np.array(delta, bool)
    d = np.where(pi == 0, False, np.where(pi == 1, True, d))
    for j in range(p):
        if pi[j] in (0.0, 1.0):
            continue
        lp = []
        for val in (False, True):
            d[j] = val
            lp.append(_subset_posterior(XtX, Xty, yty, n, prior, np.flatnonzero(d))[0]
                      + (math.log(pi[j]) if val else math.log1p(-pi[j])))
        prob1 = 1.0 / (1.0 + math.exp(min(700.0, lp[0] - lp[1])))
        d[j] = rng.uniform() < prob1
    idx = np.flatnonzero(d)
    _, mean, L, ss = _subset_posterior(XtX, Xty, yty, n, prior, idx)
    sigma2 = ss / (2.0 * rng.gamma((prior.sigma_df + n) / 2.0))
    beta = np.zeros(p)
    if len(idx):
        z = rng.standard_normal(len(idx))
        beta[idx] = mean + math.sqrt(sigma2) * np.linalg.solve(L.T, z)
    return d, beta, float(sigma2)


# --------------------------------------------------------------------------
# Model averaging
# --------------------------------------------------------------------------

def bma_weights(log_marginals, priors) -> np.ndarray:
    lm = np.asarray(log_marginals, float)
    pr = np.asarray(priors, float)
    if lm.shape != pr.shape:
        raise ValueError("one prior per model required")
    if np.any(pr < 0) or abs(pr.sum() - 1) > 1e-12:
        raise ValueError("model priors must be non-negative and sum to one")
    with np.errstate(divide="ignore"):
        s = lm + np.log(pr)
    if not np.any(np.isfinite(s)):
        raise NumericalError("every model has zero posterior mass")
    s = s - np.max(s[np.isfinite(s)])
    w = np.where(np.isfinite(s), np.exp(s), 0.0)
    return w / w.sum()


def gaussian_log_marginal(y, X, prior_mean, prior_cov, noise_var) -> float:
    """Exact log evidence of ``y = X b + e`` with ``b ~ N(m, S)``, ``e ~ N(0, s2 I)``."""
    y = np.asarray(y, float)
    X = np.atleast_2d(np.asarray(X, float))
    C = X @ np.atleast_2d(prior_cov) @ X.T + noise_var * np.eye(len(y))
    L = np.linalg.cholesky(C)
    r = np.linalg.solve(L, y - X @ np.asarray(prior_mean, float))
    return float(-0.5 * r @ r - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI)


@dataclass(frozen=True)
class MixtureForecast:
    """Predictive as a weighted Gaussian mixture per step; components in rows."""

    means: np.ndarray        # (components, horizon)
    variances: np.ndarray
    weights: np.ndarray      # (components,)

    @property
    def mean(self):
        return self.weights @ self.means

    @property
    def variance(self):
        m = self.mean
        return self.weights @ (self.variances + self.means**2) - m**2

    def quantiles(self, levels):
        return mixture_quantiles(self.means, np.sqrt(self.variances), self.weights, levels)


def mixture_quantiles(means, sds, weights, levels, iters=80):
    from scipy.special import ndtr
    means, sds = np.atleast_2d(means), np.atleast_2d(sds)
    w = np.asarray(weights, float)[:, None]
    lo = (means - 10 * sds).min(axis=0)
    hi = (means + 10 * sds).max(axis=0)
    out = np.empty((means.shape[1], len(levels)))
    for j, tau in enumerate(levels):
        a, b = lo.copy(), hi.copy()
        for _ in range(iters):
            mid = 0.5 * (a + b)
            c = (w * ndtr((mid - means) / sds)).sum(axis=0)
            below = c < tau
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
        out[:, j] = 0.5 * (a + b)
    return out


def bma_predict(forecasts: Sequence[MixtureForecast], weights) -> MixtureForecast:
    w = np.asarray(weights, float)
    if len(forecasts) != len(w):
        raise ValueError(f"{len(forecasts)} models but {len(w)} weights")
    return MixtureForecast(np.vstack([f.means for f in forecasts]),
                           np.vstack([f.variances for f in forecasts]),
                           np.concatenate([wk * f.weights for wk, f in zip(w, forecasts)]))


# --------------------------------------------------------------------------
# MCMC fit
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcConfig:
    iters: int = 2000
    burn_in: int = 500
    thin: int = 1
    seed: int = 0
    sample_state_variances: bool = True
    state_prior_df: float = 0.01
    state_sigma_guess: float = 0.01   # fraction of the target sd
    init_state_scale: float = 1.0     # prior sd of the initial state, in target sd units


@dataclass(frozen=True)
class BstsModel:
    spec: StateSpaceSpec
    prior: SpikeSlabPrior
    features: tuple
    beta: np.ndarray          # (draws, p)
    delta: np.ndarray         # (draws, p) bool
    obs_var: np.ndarray       # (draws,)
    state_var: np.ndarray     # (draws, k)
    final_state: np.ndarray   # (draws, m) sampled state at the last training step
    mcmc: McmcConfig
    scaler: dict | None = None
    train_end: str | None = None
    card: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return len(self.obs_var)

    def draw_spec(self, i):
        return self.spec.with_variances(self.state_var[i], self.obs_var[i])


def _initial_state(spec, y, cfg):
    sd = float(np.nanstd(y)) or 1.0
    a0 = np.zeros(spec.state_dim)
    first = float(y[np.isfinite(y)][0]) if np.isfinite(y).any() else 0.0
    if "level" in spec.components:
        a0[0] = first
    P0 = np.eye(spec.state_dim) * (cfg.init_state_scale * sd) ** 2
    return a0, P0


def fit_arrays(y, X, spec: StateSpaceSpec, prior: SpikeSlabPrior | None = None,
               cfg: McmcConfig = McmcConfig(), a0=None, P0=None, features=()) -> BstsModel:
    y = np.asarray(y, float)
    n = len(y)
    X = np.zeros((n, 0)) if X is None else np.asarray(X, float).reshape(n, -1)
    p = X.shape[1]
    if cfg.iters <= cfg.burn_in:
        raise ValueError("iters must exceed burn_in")
    rng = np.random.default_rng(cfg.seed)
    obs = np.isfinite(y)
    if prior is None:
        prior = SpikeSlabPrior.default(X[obs], y[obs])
    if prior.dim != p:
        raise ValueError(f"prior dimension {prior.dim} differs from {p} regressors")
    sd = float(np.nanstd(y)) or 1.0
    d_a0, d_P0 = _initial_state(spec, y, cfg)
    a0 = d_a0 if a0 is None else np.asarray(a0, float)
    P0 = d_P0 if P0 is None else np.asarray(P0, float)
    k = len(spec.state_noise_var)
    guess = (cfg.state_sigma_guess * sd) ** 2
    s_df, s_ss = cfg.state_prior_df, cfg.state_prior_df * guess

    q = spec.state_noise_var.copy() if not cfg.sample_state_variances else np.full(k, guess)
    h = float(np.nanvar(y)) * 0.5 if spec.obs_noise_var <= 0 or cfg.sample_state_variances else spec.obs_noise_var
    beta = np.zeros(p)
    delta = np.zeros(p, bool) if p else np.zeros(0, bool)
    Xo, yo = X[obs], y[obs]
    XtX = Xo.T @ Xo

    kept = [i for i in range(cfg.burn_in, cfg.iters) if (i - cfg.burn_in) % cfg.thin == 0]
    B, D, Hs, Qs, S = [], [], [], [], []
    for it in range(cfg.iters):
        cur = spec.with_variances(q, h)
        offset = X @ beta if p else 0.0
        alpha = simulation_smoother(y - offset, cur, a0, P0, rng)
        if not np.all(np.isfinite(alpha)):
            raise FitError(f"state draw diverged at iteration {it}")
        if cfg.sample_state_variances and n > 1:
            eta = alpha[1:] - alpha[:-1] @ spec.T.T
            # disturbances recovered through the selection matrix (columns are unit vectors)
            dist = eta @ np.linalg.pinv(spec.R).T
            for j in range(k):
                rate = 0.5 * (s_ss + float(dist[:, j] @ dist[:, j]))
                q[j] = rate / rng.gamma(0.5 * (s_df + n - 1))
        mu = alpha @ spec.Z
        resid = (y - mu)[obs]
        if p:
            delta, beta, h = spike_slab_draw(Xo, resid, prior, rng, delta, (XtX, Xo.T @ resid, float(resid @ resid)))
        else:
            ss = prior.sigma_ss + float(resid @ resid)
            h = ss / (2.0 * rng.gamma(0.5 * (prior.sigma_df + len(resid))))
        if not (np.isfinite(h) and np.all(np.isfinite(q))):
            raise FitError(f"non-finite variance draw at iteration {it}: obs {h}, state {q}")
        if it in kept:
            B.append(beta.copy())
            D.append(delta.copy())
            Hs.append(h)
            Qs.append(q.copy())
            S.append(alpha[-1].copy())
    card = {"n_train": n, "n_missing": int((~obs).sum()), "seed": cfg.seed,
            "state_dim": spec.state_dim, "components": list(spec.components)}
    return BstsModel(spec, prior, tuple(features), np.array(B).reshape(len(kept), p),
                     np.array(D, bool).reshape(len(kept), p), np.array(Hs), np.array(Qs).reshape(len(kept), k),
                     np.array(S), cfg, card=card)


def fit(train: ds.TimeSeriesFrame, features: Sequence[str], spec: StateSpaceSpec | None = None,
        prior: SpikeSlabPrior | None = None, mcmc: McmcConfig = McmcConfig(),
        window_hours: int | None = None) -> BstsModel:
    """Fit on a frame; ``window_hours`` keeps only the most recent part of the training data."""
    if window_hours is not None:
        train = train[max(0, len(train) - int(window_hours)):]
    features = tuple(features)
    X, y, scaler = ds.design_matrix(train, features) if features else (None, train.ghi.copy(), None)
    spec = spec or StateSpaceSpec.build()
    model = fit_arrays(y, X, spec, prior, mcmc, features=features)
    te = str(train.timestamps[-1]) if len(train) else None
    return BstsModel(**{**model.__dict__, "scaler": scaler.to_dict() if scaler else None, "train_end": te})


# --------------------------------------------------------------------------
# Forecasting
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _block_moments_sparse(y, tr, tc, tv, Z, RQR, H, a0, P0, block_start, horizon):
    n = len(y)
    means = np.empty(n)
    variances = np.empty(n)
    a = a0.copy()
    P = P0.copy()
    for t in range(n):
        if block_start[t]:
            ab = a.copy()
            Pb = P.copy()
            j = t
            while j < n and (j == t or not block_start[j]) and j - t < horizon:
                means[j] = Z @ ab
                variances[j] = Z @ Pb @ Z + H
                ab = _tvec(tr, tc, tv, ab)
                Pb = _tpt(tr, tc, tv, Pb) + RQR
                j += 1
        if np.isnan(y[t]):
            a = _tvec(tr, tc, tv, a)
            P = _tpt(tr, tc, tv, P) + RQR
            continue
        M = P @ Z
        f = Z @ M + H
        v = y[t] - Z @ a
        TM = _tvec(tr, tc, tv, M)
        a = _tvec(tr, tc, tv, a) + TM * (v / f)
        P = _tpt(tr, tc, tv, P) + RQR - np.outer(TM, TM) / f
        P = 0.5 * (P + P.T)
    return means, variances


def _block_moments(y, T, Z, RQR, H, a0, P0, block_start, horizon):
    """Causal rolling-origin predictive moments.

    The filter runs over ``y`` (already net of regression effects) and, at
    each block start, the state is propagated ``horizon`` steps without
    using any observation at or after the origin.
    """
    tr, tc, tv = _sparse(T)
    return _block_moments_sparse(y, tr, tc, tv, Z, RQR, float(H), a0, P0, block_start, int(horizon))


def _draw_indices(model, max_draws):
    D = model.n_draws
    if max_draws is None or D <= max_draws:
        return np.arange(D)
    return np.unique(np.linspace(0, D - 1, max_draws).round().astype(int))


def rolling_moments(model: BstsModel, X_future, y_future, block_start, horizon, max_draws=100):
    """Per-draw predictive means and variances over a stretch following training.

    ``block_start`` marks forecast origins; observations before an origin may
    update the state, the ones at or after it never reach that block.
    """
    n = len(block_start)
    y_future = np.asarray(y_future, float)
    X_future = np.zeros((n, 0)) if X_future is None else np.asarray(X_future, float).reshape(n, -1)
    idx = _draw_indices(model, max_draws)
    means = np.empty((len(idx), n))
    variances = np.empty_like(means)
    for r, i in enumerate(idx):
        spec = model.draw_spec(i)
        reg = X_future @ model.beta[i] if X_future.shape[1] else np.zeros(n)
        a0 = spec.T @ model.final_state[i]
        P0 = spec.RQR
        m, v = _block_moments(y_future - reg, spec.T, spec.Z, spec.RQR, spec.obs_noise_var,
                              a0, P0, np.asarray(block_start, bool), int(horizon))
        means[r] = m + reg
        variances[r] = v
    return MixtureForecast(means, variances, np.full(len(idx), 1.0 / len(idx)))


def forecast(model: BstsModel, horizon: int, future_regressors=None, max_draws=None) -> MixtureForecast:
    """Predictive mixture for the ``horizon`` steps after the training window."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    p = model.beta.shape[1]
    if p:
        Xf = np.asarray(future_regressors, float).reshape(-1, p)
        if len(Xf) != horizon:
            raise ValueError(f"need {horizon} regressor rows, got {len(Xf)}")
    else:
        Xf = None
    start = np.zeros(horizon, bool)
    start[0] = True
    return rolling_moments(model, Xf, np.full(horizon, np.nan), start, horizon, max_draws)


def deterministic_forecast(model: BstsModel, future_regressors, draw=0):
    """One-step mean for a single draw from its sampled final state (diagnostic)."""
    spec = model.draw_spec(draw)
    x = np.asarray(future_regressors, float).reshape(-1)
    return float(spec.Z @ spec.T @ model.final_state[draw] + (x @ model.beta[draw] if len(x) else 0.0))


# --------------------------------------------------------------------------
# Persistence: draw archive (long CSV) + JSON metadata
# --------------------------------------------------------------------------

def save_model(model: BstsModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    from .dataset import format_float
    with open(directory / "draws.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw", "parameter", "value"])
        for i in range(model.n_draws):
            for j, f in enumerate(model.features):
                w.writerow([i, f"beta[{f}]", format_float(model.beta[i, j])])
                w.writerow([i, f"delta[{f}]", int(model.delta[i, j])])
            w.writerow([i, "obs_var", format_float(model.obs_var[i])])
            for j, v in enumerate(model.state_var[i]):
                w.writerow([i, f"state_var[{j}]", format_float(v)])
            for j, v in enumerate(model.final_state[i]):
                w.writerow([i, f"state[{j}]", format_float(v)])
    meta = {"format_version": FORMAT_VERSION, "kind": "bsts", "spec": model.spec.to_dict(),
            "prior": model.prior.to_dict(), "features": list(model.features), "mcmc": model.mcmc.__dict__,
            "scaler": model.scaler, "train_end": model.train_end, "card": model.card,
            "n_draws": model.n_draws}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_model(directory) -> BstsModel:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "bsts":
        raise ValueError("unsupported model directory")
    spec = StateSpaceSpec.from_dict(meta["spec"])
    feats = tuple(meta["features"])
    D, p, k, m = meta["n_draws"], len(feats), len(spec.state_noise_var), spec.state_dim
    beta, delta = np.zeros((D, p)), np.zeros((D, p), bool)
    obs, sv, st = np.zeros(D), np.zeros((D, k)), np.zeros((D, m))
    col = {f: j for j, f in enumerate(feats)}
    with open(directory / "draws.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            i, name, val = int(row["draw"]), row["parameter"], row["value"]
            if name == "obs_var":
                obs[i] = float(val)
            elif name.startswith("beta["):
                beta[i, col[name[5:-1]]] = float(val)
            elif name.startswith("delta["):
                delta[i, col[name[6:-1]]] = val == "1"
            elif name.startswith("state_var["):
                sv[i, int(name[10:-1])] = float(val)
            elif name.startswith("state["):
                st[i, int(name[6:-1])] = float(val)
    return BstsModel(spec, SpikeSlabPrior.from_dict(meta["prior"]), feats, beta, delta, obs, sv, st,
                     McmcConfig(**meta["mcmc"]), meta["scaler"], meta["train_end"], meta["card"])
