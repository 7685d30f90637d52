"""Exact Gaussian process regression with a squared-exponential kernel."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import FitError, NumericalError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
JITTER_START, JITTER_MAX = 1e-10, 1e-6


@dataclass(frozen=True)
class KernelParams:
    """RBF hyperparameters.

    ``length_scale`` is a scalar for the isotropic kernel or a vector with one
    entry per input dimension.
    """

    length_scale: float | np.ndarray
    signal_variance: float
    noise_variance: float

    def __post_init__(self):
        ls = np.asarray(self.length_scale, dtype=float)
        if ls.ndim == 0:
            ls = float(ls)
            ok = ls > 0
        else:
            ls = ls.copy()
            ls.setflags(write=False)
            ok = bool(np.all(ls > 0))
        object.__setattr__(self, "length_scale", ls)
        if not (ok and self.signal_variance > 0 and self.noise_variance > 0):
            raise ValueError(f"kernel parameters must be strictly positive: {self}")

    @property
    def ard(self) -> bool:
        return np.ndim(self.length_scale) > 0

    def to_dict(self):
        ls = self.length_scale
        return {
            "length_scale": ls.tolist() if self.ard else ls,
            "signal_variance": float(self.signal_variance),
            "noise_variance": float(self.noise_variance),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["length_scale"], d["signal_variance"], d["noise_variance"])


def rbf(x_i, x_j, params: KernelParams, same_point: bool = False) -> float:
    """sigma^2 exp(-|x_i - x_j|^2 / (2 l^2)) plus the noise variance when ``same_point``."""
    x_i, x_j = np.atleast_1d(np.asarray(x_i, float)), np.atleast_1d(np.asarray(x_j, float))
    if x_i.shape != x_j.shape:
        raise ValueError(f"dimension mismatch: {x_i.shape} vs {x_j.shape}")
    r2 = np.sum(((x_i - x_j) / params.length_scale) ** 2)
    return float(params.signal_variance * np.exp(-0.5 * r2) + (params.noise_variance if same_point else 0.0))


def _scaled(X, params):
    return np.asarray(X, float) / params.length_scale


def kernel_matrix(A, B, params: KernelParams) -> np.ndarray:
    """Noise-free cross covariance between the rows of ``A`` and ``B``."""
    return params.signal_variance * np.exp(-0.5 * cdist(_scaled(A, params), _scaled(B, params), "sqeuclidean"))


def train_kernel(X, params: KernelParams) -> np.ndarray:
    """Symmetric noise-free kernel over the training rows."""
    D = squareform(pdist(_scaled(X, params), "sqeuclidean"))
    return params.signal_variance * np.exp(-0.5 * D)


def jittered_cholesky(K: np.ndarray, scale: float):
    """Lower Cholesky factor of ``K``, adding diagonal jitter on failure.

    Jitter starts at 1e-10 * scale and grows tenfold up to 1e-6 * scale.
    Returns ``(L, jitter)``.
    """
    jitter = 0.0
    while True:
        try:
            Kj = K if jitter == 0.0 else K + jitter * np.eye(len(K))
            return cholesky(Kj, lower=True, check_finite=True), jitter
        except (np.linalg.LinAlgError, ValueError):
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10
            if jitter > JITTER_MAX * scale * (1 + 1e-9):
                raise NumericalError("kernel matrix is not positive definite after jitter") from None


@dataclass(frozen=True)
class GpModel:
    params: KernelParams
    train_X: np.ndarray
    train_y: np.ndarray
    factor: np.ndarray
    alpha: np.ndarray
    y_mean: float
    jitter: float = 0.0
    card: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.train_y)


def factorize(X, y, params: KernelParams, y_mean: float | None = None, card=None) -> GpModel:
    """Condition a GP with fixed hyperparameters on ``(X, y)``."""
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).reshape(-1)
    if len(X) != len(y):
        raise ValueError("X and y lengths differ")
    if params.ard and len(params.length_scale) != X.shape[1]:
        raise ValueError("per-dimension length scales do not match X")
    y_mean = float(np.mean(y)) if y_mean is None else float(y_mean)
    yc = y - y_mean
    K = train_kernel(X, params)
    K[np.diag_indices_from(K)] += params.noise_variance
    L, jitter = jittered_cholesky(K, params.signal_variance)
    alpha = cho_solve((L, True), yc)
    return GpModel(params, X, yc, L, alpha, y_mean, jitter, dict(card or {}))


def log_marginal_likelihood(model: GpModel) -> float:
    y, L = model.train_y, model.factor
    return float(-0.5 * y @ model.alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * np.log(2 * np.pi))


def predict(model: GpModel, X_new) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of a noisy observation at each row of ``X_new``."""
    X_new = np.asarray(X_new, float)
    if X_new.ndim == 1:
        X_new = X_new.reshape(-1, model.train_X.shape[1]) if X_new.size else X_new.reshape(0, model.train_X.shape[1])
    if X_new.shape[1] != model.train_X.shape[1]:
        raise ValueError(f"expected {model.train_X.shape[1]} columns, got {X_new.shape[1]}")
    if len(X_new) == 0:
        return np.empty(0), np.empty(0)
    Ks = kernel_matrix(X_new, model.train_X, model.params)
    mean = Ks @ model.alpha + model.y_mean
    v = solve_triangular(model.factor, Ks.T, lower=True)
    p = model.params
    var = p.signal_variance + p.noise_variance - np.einsum("ij,ij->j", v, v)
    return mean, np.maximum(var, np.finfo(float).tiny)


# --------------------------------------------------------------------------
# Hyperparameter optimisation
# --------------------------------------------------------------------------

def _unpack(theta, ard):
    ls = np.exp(theta[:-2]) if ard else float(np.exp(theta[0]))
    return KernelParams(ls, float(np.exp(theta[-2])), float(np.exp(theta[-1])))


def _pack(params: KernelParams, d: int, ard: bool):
    ls = np.broadcast_to(params.length_scale, (d,)) if ard else [float(np.mean(params.length_scale))]
    return np.concatenate([np.log(ls), [np.log(params.signal_variance), np.log(params.noise_variance)]])


def lml_and_grad(theta, X, yc, ard=False):
    """Log marginal likelihood and its gradient in log-parameter space."""
    params = _unpack(theta, ard)
    N = len(yc)
    Xs = X / params.length_scale
    if ard:
        diffs = [squareform(pdist(X[:, [k]], "sqeuclidean")) for k in range(X.shape[1])]
        D = sum(dk / params.length_scale[k] ** 2 for k, dk in enumerate(diffs))
    else:
        D = squareform(pdist(Xs, "sqeuclidean"))
    R = np.exp(-0.5 * D)
    K = params.signal_variance * R
    K[np.diag_indices_from(K)] += params.noise_variance
    L, _ = jittered_cholesky(K, params.signal_variance)
    alpha = cho_solve((L, True), yc)
    lml = -0.5 * yc @ alpha - np.log(np.diag(L)).sum() - 0.5 * N * np.log(2 * np.pi)
    Kinv = cho_solve((L, True), np.eye(N))
    A = np.outer(alpha, alpha) - Kinv
    SR = params.signal_variance * R
    grads = []
    if ard:
        for k, dk in enumerate(diffs):
            grads.append(0.5 * np.sum(A * SR * dk) / params.length_scale[k] ** 2)
    else:
        grads.append(0.5 * np.sum(A * SR * D))
    grads.append(0.5 * np.sum(A * SR))
    grads.append(0.5 * params.noise_variance * np.trace(A))
    return float(lml), np.array(grads)


@dataclass(frozen=True)
class OptimizerBudget:
    restarts: int = 5
    max_iter: int = 200
    max_n: int = 4000
    subsample: int = 2000
    ard: bool = False
    seed: int = 0


def default_init(X, y, ard=False) -> KernelParams:
    v = float(np.var(y)) if np.var(y) > 0 else 1.0
    d = X.shape[1]
    ls = np.ones(d) * np.sqrt(d) if ard else float(np.sqrt(d))
    return KernelParams(ls, v, 0.1 * v)


def _bounds(d, ard, v):
    n_ls = d if ard else 1
    return ([(np.log(1e-3), np.log(1e3))] * n_ls
            + [(np.log(1e-12 * v), np.log(1e4 * v)), (np.log(1e-10 * v), np.log(1e2 * v))])


def fit(X, y, init: KernelParams | None = None, opt: OptimizerBudget = OptimizerBudget()) -> GpModel:
    """Fit hyperparameters by maximising the log marginal likelihood.

    The first start is ``init``; the remaining ``opt.restarts - 1`` starts are
    drawn log-uniformly around plausible scales. The best finite iterate seen
    across all runs is kept, so the result never scores below ``init``.
    """
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).reshape(-1)
    if len(y) < 2:
        raise ValueError("need at least two training points")
    rng = np.random.default_rng(opt.seed)
    card = {"n_input": int(len(y)), "subsampled": False}
    if len(y) > opt.max_n:
        idx = np.sort(rng.choice(len(y), size=opt.subsample, replace=False))
        X, y = X[idx], y[idx]
        card.update(subsampled=True, n_used=int(len(y)), subsample_seed=int(opt.seed))
        logger.info("GP training subsampled to %d of %d points", len(y), card["n_input"])
    ard = opt.ard if init is None else init.ard
    init = init or default_init(X, y, ard)
    y_mean = float(np.mean(y))
    yc = y - y_mean
    v = float(np.var(y)) if np.var(y) > 0 else 1.0
    d = X.shape[1]
    bounds = _bounds(d, ard, v)
    lo, hi = np.array(bounds).T

    best = {"theta": None, "value": -np.inf}

    def objective(theta):
        try:
            value, grad = lml_and_grad(theta, X, yc, ard)
        except NumericalError:
            return 1e25, np.zeros_like(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return 1e25, np.zeros_like(theta)
        if value > best["value"]:
            best["theta"], best["value"] = theta.copy(), value
        return -value, -grad

    theta0 = np.clip(_pack(init, d, ard), lo, hi)
    starts = [theta0]
    for _ in range(max(opt.restarts, 1) - 1):
        n_ls = d if ard else 1
        s = np.concatenate([
            rng.uniform(np.log(0.2), np.log(5.0), n_ls) + np.log(np.sqrt(d)),
            [rng.uniform(np.log(0.1 * v), np.log(10 * v)), rng.uniform(np.log(1e-4 * v), np.log(v))],
        ])
        starts.append(np.clip(s, lo, hi))
    for s in starts:
        objective(s)
        if opt.max_iter > 0:
            minimize(objective, s, jac=True, method="L-BFGS-B", bounds=bounds,
                     options={"maxiter": opt.max_iter})
    if best["theta"] is None:
        raise FitError("every hyperparameter iterate produced a non-finite objective")
    params = _unpack(best["theta"], ard)
    card.update(log_marginal_likelihood=best["value"], restarts=len(starts), max_iter=opt.max_iter)
    return factorize(X, y, params, y_mean, card)


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def save_model(model: GpModel, path, kind="gp", extra=None) -> Path:
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "params": model.params.to_dict(),
        "y_mean": model.y_mean,
        "jitter": model.jitter,
        "card": model.card,
    }
    meta.update(extra or {})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), train_X=model.train_X,
                 train_y=model.train_y, factor=model.factor, alpha=model.alpha)
    return path


def load_model(path) -> GpModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != FORMAT_VERSION or meta.get("kind") != "gp":
            raise ValueError(f"unsupported model file: {meta.get('kind')} v{meta.get('format_version')}")
        return GpModel(KernelParams.from_dict(meta["params"]), z["train_X"], z["train_y"],
                       z["factor"], z["alpha"], meta["y_mean"], meta["jitter"], meta["card"])


def with_params(model: GpModel, params: KernelParams) -> GpModel:
    """Refactorize a fitted model under new hyperparameters."""
    return factorize(model.train_X, model.train_y + model.y_mean, params, model.y_mean, model.card)
