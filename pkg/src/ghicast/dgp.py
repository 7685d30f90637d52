"""Two-layer deep Gaussian process fitted by Gibbs / elliptical-slice / Metropolis MCMC.

Inputs ``X`` pass through a latent layer ``W`` (one GP per latent node, unit
variance, tiny fixed nugget) before reaching the response::

    y | W ~ N(0, s2 * R(W; l) + g * I)
    W[:, j] ~ N(0, R(X; theta_j) + 1e-6 * I)

Each sweep updates every latent column by elliptical slice sampling, each inner
length scale by a whitened random-walk Metropolis step in log space, then the outer
kernel parameters jointly by the same kind of step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist, pdist, squareform

from . import gp
from .errors import NumericalError

logger = logging.getLogger(__name__)

INNER_NUGGET = 1e-6
LOG_2PI = math.log(2 * math.pi)


class SamplerError(NumericalError):
    pass


def ess_step(current, prior_factor, log_lik: Callable[[np.ndarray], float], rng,
             current_log_lik: float | None = None, max_shrink: int = 200):
    """One elliptical slice sampling update of a latent Gaussian vector.

    ``prior_factor`` is a lower Cholesky factor of the zero-mean prior
    covariance. Returns ``(new_vector, new_log_lik)``. The bracket shrinks
    towards the current point, so a proposal is always eventually accepted.
    """
    current = np.asarray(current, float)
    cur_ll = log_lik(current) if current_log_lik is None else current_log_lik
    if not np.isfinite(cur_ll):
        raise SamplerError("log-likelihood at the current state is not finite")
    nu = prior_factor @ rng.standard_normal(len(current))
    threshold = cur_ll + math.log(rng.uniform())
    angle = rng.uniform(0.0, 2 * math.pi)
    lo, hi = angle - 2 * math.pi, angle
    for _ in range(max_shrink):
        proposal = current * math.cos(angle) + nu * math.sin(angle)
        ll = log_lik(proposal)
        if ll > threshold:
            return proposal, ll
        if angle < 0:
            lo = angle
        else:
            hi = angle
        angle = rng.uniform(lo, hi)
    return current, cur_ll


def _sq(X):
    return squareform(pdist(np.asarray(X, float), "sqeuclidean"))


def _gauss_loglik(y, K):
    try:
        L = cholesky(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf
    a = solve_triangular(L, y, lower=True)
    return float(-0.5 * a @ a - np.log(np.diag(L)).sum() - 0.5 * len(y) * LOG_2PI)


def _inner_cov(D, theta):
    K = np.exp(-0.5 * D / theta**2)
    K[np.diag_indices_from(K)] += INNER_NUGGET
    return K


def _outer_cov(W, outer):
    l, s2, g = outer
    K = s2 * np.exp(-0.5 * _sq(W) / l**2)
    K[np.diag_indices_from(K)] += g
    return K


@dataclass(frozen=True)
class DgpDraw:
    W: np.ndarray
    inner_length: np.ndarray
    outer: gp.KernelParams


@dataclass(frozen=True)
class SamplerConfig:
    iters: int = 4000
    burn_in: int = 2000
    thin: int = 5
    step: float = 0.1
    max_n: int = 1000
    seed: int = 0


@dataclass(frozen=True)
class DgpModel:
    draws: list
    X: np.ndarray
    z: np.ndarray
    y_mean: float
    y_scale: float
    p: int
    burn_in: int
    thin: int
    iters: int
    identity_inner: bool = False
    card: dict = field(default_factory=dict)


def _log_prior_outer(log_outer):
    ll, ls2, lg = log_outer
    return -0.5 * ll**2 - 0.5 * ls2**2 - 0.5 * ((lg - math.log(0.1)) / 2.0) ** 2


def fit(X, y, p: int | None = None, cfg: SamplerConfig = SamplerConfig(),
        identity_inner: bool = False) -> DgpModel:
    """Sample the two-layer posterior.

    ``identity_inner`` clamps the latent layer to ``W = X`` so that only the
    outer kernel is sampled; this is the single-layer special case.
    """
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).reshape(-1)
    if cfg.iters <= cfg.burn_in:
        raise ValueError(f"iters ({cfg.iters}) must exceed burn_in ({cfg.burn_in})")
    if cfg.thin < 1:
        raise ValueError("thin must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    card = {"n_input": int(len(y)), "subsampled": False}
    if len(y) > cfg.max_n:
        idx = np.sort(rng.choice(len(y), cfg.max_n, replace=False))
        X, y = X[idx], y[idx]
        card.update(subsampled=True, n_used=int(len(y)))
        logger.info("DGP training subsampled to %d of %d points", len(y), card["n_input"])
    N, d = X.shape
    p = d if p is None else int(p)
    if p < 1:
        raise ValueError("need at least one latent node")
    if identity_inner and p != d:
        raise ValueError("identity inner layer requires p == input dimension")

    y_mean = float(y.mean())
    y_scale = float(y.std()) if y.std() > 0 else 1.0
    z = (y - y_mean) / y_scale

    Dx = _sq(X)
    W = np.column_stack([X[:, j % d] for j in range(p)])
    if p > d:
        W[:, d:] += 0.1 * rng.standard_normal((N, p - d))
    log_theta = np.full(p, math.log(math.sqrt(d)))
    log_outer = np.array([0.0, 0.0, math.log(0.1)])

    prior_theta = math.log(math.sqrt(d))
    inner_L = [None] * p
    if not identity_inner:
        for j in range(p):
            inner_L[j] = cholesky(_inner_cov(Dx, math.exp(log_theta[j])), lower=True)

    def outer_ll(Wm, lo):
        return _gauss_loglik(z, _outer_cov(Wm, np.exp(lo)))

    cur_ll = outer_ll(W, log_outer)
    if not np.isfinite(cur_ll):
        raise SamplerError("initial outer likelihood is not finite")

    draws = []
    accept = {"outer": 0, "inner": 0}
    for it in range(cfg.iters):
        if not identity_inner:
            for j in range(p):
                def ll_col(col, j=j):
                    Wp = W.copy()
                    Wp[:, j] = col
                    return outer_ll(Wp, log_outer)
                W[:, j], cur_ll = ess_step(W[:, j], inner_L[j], ll_col, rng, cur_ll)

                # whitened move: hold L(theta)^-1 W_j fixed while theta changes
                prop = log_theta[j] + cfg.step * rng.standard_normal()
                Lp = cholesky(_inner_cov(Dx, math.exp(prop)), lower=True)
                Wp = W.copy()
                Wp[:, j] = Lp @ solve_triangular(inner_L[j], W[:, j], lower=True)
                ll_p = outer_ll(Wp, log_outer)
                log_r = (ll_p - cur_ll
                         - 0.5 * (prop - prior_theta) ** 2
                         + 0.5 * (log_theta[j] - prior_theta) ** 2)
                if np.isfinite(ll_p) and math.log(rng.uniform()) < log_r:
                    log_theta[j], inner_L[j], cur_ll = prop, Lp, ll_p
                    W = Wp
                    accept["inner"] += 1

        prop = log_outer + cfg.step * rng.standard_normal(3)
        ll_p = outer_ll(W, prop)
        log_r = ll_p + _log_prior_outer(prop) - cur_ll - _log_prior_outer(log_outer)
        if np.isfinite(ll_p) and math.log(rng.uniform()) < log_r:
            log_outer, cur_ll = prop, ll_p
            accept["outer"] += 1

        if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
            if not np.all(np.isfinite(W)):
                raise SamplerError(f"non-finite latent values at iteration {it}")
            l, s2, g = np.exp(log_outer)
            draws.append(DgpDraw(W.copy(), np.exp(log_theta), gp.KernelParams(l, s2, g)))

    card.update(
        outer_acceptance=accept["outer"] / cfg.iters,
        inner_acceptance=accept["inner"] / max(1, cfg.iters * p) if not identity_inner else None,
        seed=cfg.seed,
    )
    return DgpModel(draws, X, z, y_mean, y_scale, p, cfg.burn_in, cfg.thin, cfg.iters,
                    identity_inner, card)


def _propagate(model: DgpModel, draw: DgpDraw, X_new):
    """Inner-layer posterior mean at new inputs."""
    if model.identity_inner:
        return X_new
    Dx = _sq(model.X)
    Dn = cdist(X_new, model.X, "sqeuclidean")
    cols = []
    for j in range(model.p):
        theta = draw.inner_length[j]
        L = cholesky(_inner_cov(Dx, theta), lower=True)
        cols.append(np.exp(-0.5 * Dn / theta**2) @ cho_solve((L, True), draw.W[:, j]))
    return np.column_stack(cols)


def draw_moments(model: DgpModel, X_new) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw predictive means and variances, shape (n_draws, M), data units."""
    X_new = np.atleast_2d(np.asarray(X_new, float))
    if X_new.shape[1] != model.X.shape[1]:
        raise ValueError(f"expected {model.X.shape[1]} columns, got {X_new.shape[1]}")
    if not model.draws:
        raise ValueError("model holds no posterior draws")
    M = len(X_new)
    means = np.empty((len(model.draws), M))
    variances = np.empty_like(means)
    for k, draw in enumerate(model.draws):
        W_new = _propagate(model, draw, X_new) if M else np.empty((0, model.p))
        fitted = gp.factorize(draw.W, model.z, draw.outer, y_mean=0.0)
        m, v = gp.predict(fitted, W_new)
        means[k] = m * model.y_scale + model.y_mean
        variances[k] = v * model.y_scale**2
    return means, variances


def predict(model: DgpModel, X_new):
    """Pooled predictive mean, variance and Monte Carlo standard error of the mean.

    The variance follows the law of total variance across retained draws.
    """
    means, variances = draw_moments(model, X_new)
    mean = means.mean(axis=0)
    var = variances.mean(axis=0) + means.var(axis=0)
    mc_se = means.std(axis=0, ddof=1) / math.sqrt(len(means)) if len(means) > 1 else np.zeros_like(mean)
    return mean, var, mc_se


FORMAT_VERSION = 1


def save_model(model: DgpModel, path) -> Path:
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": "dgp",
        "y_mean": model.y_mean,
        "y_scale": model.y_scale,
        "p": model.p,
        "burn_in": model.burn_in,
        "thin": model.thin,
        "iters": model.iters,
        "identity_inner": model.identity_inner,
        "card": model.card,
    }
    W = np.stack([d.W for d in model.draws])
    inner = np.stack([d.inner_length for d in model.draws])
    outer = np.array([[float(d.outer.length_scale), d.outer.signal_variance, d.outer.noise_variance]
                      for d in model.draws])
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), X=model.X, z=model.z,
                 W=W, inner=inner, outer=outer)
    return path


def load_model(path) -> DgpModel:
    with np.load(Path(path), allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "dgp":
            raise ValueError(f"unsupported model file: {meta.get('kind')} v{meta.get('format_version')}")
        draws = [DgpDraw(W, th, gp.KernelParams(*o)) for W, th, o in zip(f["W"], f["inner"], f["outer"])]
        return DgpModel(draws, f["X"], f["z"], meta["y_mean"], meta["y_scale"], meta["p"],
                        meta["burn_in"], meta["thin"], meta["iters"], meta["identity_inner"], meta["card"])
