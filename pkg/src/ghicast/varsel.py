"""Variable selection by lasso, elastic net and boosted-tree importance.

Each method picks a subset of the candidate covariates on the training
window; the subset is then judged by the test MAE of a median linear
quantile regression fitted on the training window.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset as ds
from . import gbr
from .errors import ConfigError, FitError
from .quantile import fit_lqr
from .scoring import mae

logger = logging.getLogger(__name__)

METHODS = ("lasso", "elasticnet", "gbr")


def soft_threshold(z, t):
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _objective(X, y, beta, lam, alpha):
    r = y - X @ beta
    return (0.5 * r @ r / len(y) + lam * (alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * beta @ beta))


def elastic_net(X, y, lam: float, alpha_mix: float = 0.5, tol: float = 1e-7, max_sweeps: int = 100_000,
                beta0=None, trace: list | None = None) -> np.ndarray:
    """Cyclic coordinate descent for

        1/(2N) ||y - X b||^2 + lam * (alpha ||b||_1 + (1 - alpha)/2 ||b||^2)

    Stops when no coordinate moves by more than ``tol`` (in standardised units)
    during a full sweep. ``trace`` collects the objective after every sweep.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if lam < 0:
        raise ValueError("penalty must be non-negative")
    if not 0 <= alpha_mix <= 1:
        raise ValueError("alpha_mix must lie in [0, 1]")
    n, p = X.shape
    beta = np.zeros(p) if beta0 is None else np.array(beta0, float)
    if p == 0:
        return beta
    if beta0 is None and lam * alpha_mix > 0 and np.max(np.abs(X.T @ y)) / n <= lam * alpha_mix:
        return beta   # zero satisfies the optimality conditions exactly
    col_sq = (X * X).sum(axis=0) / n
    denom = col_sq + lam * (1 - alpha_mix)
    r = y - X @ beta
    l1 = lam * alpha_mix
    for sweep in range(max_sweeps):
        max_move = 0.0
        for j in range(p):
            if denom[j] == 0:
                continue
            old = beta[j]
            z = X[:, j] @ r / n + col_sq[j] * old
            new = soft_threshold(z, l1) / denom[j]
            if new != old:
                r -= X[:, j] * (new - old)
                beta[j] = new
                max_move = max(max_move, abs(new - old) * np.sqrt(col_sq[j]))
        if trace is not None:
            trace.append(_objective(X, y, beta, lam, alpha_mix))
        if max_move <= tol:
            return beta
    raise FitError(f"coordinate descent did not converge in {max_sweeps} sweeps; "
                   f"last move {max_move:.3g}, residual norm {np.linalg.norm(r):.6g}")


def lasso(X, y, lam: float, **kw) -> np.ndarray:
    return elastic_net(X, y, lam, 1.0, **kw)


def lambda_max(X, y, alpha_mix=1.0):
    """Smallest penalty at which every coefficient is zero."""
    return float(np.max(np.abs(X.T @ y)) / len(y) / max(alpha_mix, 1e-3))


def lambda_grid(X, y, alpha_mix=1.0, n=100, ratio=1e-4):
    top = lambda_max(X, y, alpha_mix)
    return np.geomspace(top, top * ratio, n) if top > 0 else np.zeros(1)


def path(X, y, lams, alpha_mix=1.0, tol=1e-7):
    """Warm-started coefficient path, one row per penalty."""
    out = np.zeros((len(lams), X.shape[1]))
    beta = None
    for i, lam in enumerate(lams):
        beta = elastic_net(X, y, lam, alpha_mix, tol=tol, beta0=beta)
        out[i] = beta
    return out


def time_folds(n, k=5):
    """Contiguous, unshuffled folds as index arrays."""
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} rows")
    bounds = np.linspace(0, n, k + 1).round().astype(int)
    return [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def cv_lambda(X, y, alpha_mix=1.0, folds=5, n_lambda=100):
    """Penalty minimising contiguous-fold validation MSE; returns (lambda, grid, cv_mse)."""
    lams = lambda_grid(X, y - y.mean(), alpha_mix, n_lambda)
    errs = np.zeros(len(lams))
    for hold in time_folds(len(y), folds):
        train = np.setdiff1d(np.arange(len(y)), hold)
        mu = y[train].mean()
        B = path(X[train], y[train] - mu, lams, alpha_mix)
        pred = X[hold] @ B.T + mu
        errs += ((y[hold][:, None] - pred) ** 2).sum(axis=0)
    errs /= len(y)
    return float(lams[int(np.argmin(errs))]), lams, errs


@dataclass
class SelectionResult:
    method: str
    selected: tuple
    scores: dict
    mae: float = float("nan")
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SelectConfig:
    candidates: tuple = ds.COVARIATES
    alpha_mix: float = 0.5
    folds: int = 5
    n_lambda: int = 100
    gbr: gbr.GbrConfig = gbr.GbrConfig()


def select(method: str, split: ds.DatasetSplit, cfg: SelectConfig = SelectConfig()) -> SelectionResult:
    if method not in METHODS:
        raise ConfigError(f"unknown selection method {method!r}; choose from {METHODS}")
    cands = tuple(cfg.candidates)
    if not cands:
        raise ConfigError("no candidate features")
    X, y, _ = ds.design_matrix(split.train, cands)
    detail = {}
    if len(cands) == 1:
        chosen, scores = cands, {cands[0]: 1.0}
    elif method == "gbr":
        model = gbr.fit(X, y, cfg.gbr)
        imp = gbr.importance(model)
        scores = dict(zip(cands, imp.tolist()))
        thr = 1.0 / (2 * len(cands))
        chosen = tuple(f for f, s in zip(cands, imp) if s > thr)
        detail["threshold"] = thr
    else:
        alpha = 1.0 if method == "lasso" else cfg.alpha_mix
        lam, _, _ = cv_lambda(X, y, alpha, cfg.folds, cfg.n_lambda)
        beta = elastic_net(X, y - y.mean(), lam, alpha)
        scores = dict(zip(cands, beta.tolist()))
        chosen = tuple(f for f, b in zip(cands, beta) if b != 0)
        detail.update(lam=lam, alpha_mix=alpha)
        if not chosen:
            # first variable to enter the path
            B = path(X, y - y.mean(), lambda_grid(X, y - y.mean(), alpha, cfg.n_lambda), alpha)
            entry = [int(np.argmax(B[:, j] != 0)) if B[:, j].any() else len(B) for j in range(len(cands))]
            chosen = (cands[int(np.argmin(entry))],)
            logger.warning("%s selected nothing; falling back to %s", method, chosen[0])
    if not chosen:
        best = max(cands, key=lambda f: (abs(scores[f]), -cands.index(f)))
        logger.warning("%s selected nothing; falling back to %s", method, best)
        chosen = (best,)
    result = SelectionResult(method, chosen, scores, detail=detail)
    result.mae = evaluate(chosen, split)
    return result


def evaluate(selected: Sequence[str], split: ds.DatasetSplit) -> float:
    """Test MAE of a median linear quantile regression on the selected covariates."""
    selected = tuple(selected)
    X, y, scaler = ds.design_matrix(split.train, selected)
    model = fit_lqr(X, y, [0.5])
    Xt = scaler.transform(split.test) if selected else np.empty((len(split.test), 0))
    return mae(split.test.ghi, model.predict(Xt)[:, 0])


def write_results(results: Sequence[SelectionResult], csv_path, json_path):
    from .dataset import format_float
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "MAE", "selected"])
        for r in results:
            w.writerow([r.method, format_float(r.mae), ";".join(r.selected)])
    Path(json_path).write_text(json.dumps([asdict(r) for r in results], indent=2, sort_keys=True) + "\n")
    return Path(csv_path), Path(json_path)
