"""Quantile losses, quantile regression models and forecast combination.

Every regression here minimises the check loss. Linear models use an
MM-style iteratively reweighted least squares with a vanishing smoothing
constant followed by an exact vertex descent; additive models reuse the same
iteration with a quadratic roughness penalty on cubic regression spline
coefficients; the neural variant minimises a Huber-smoothed loss with
L-BFGS.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import qr
from scipy.optimize import minimize
from scipy.special import expit

from .errors import ConfigError, DataError, FitError, ProtocolError

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = tuple(round(0.05 * k, 2) for k in range(1, 20))


def _check_tau(tau):
    t = np.asarray(tau, float)
    if np.any((t <= 0) | (t >= 1)) or np.any(~np.isfinite(t)):
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    return t


def pinball(y, q, tau):
    """Pinball loss with the factor-2 scaling: 2(1-tau)|y-q| below, 2 tau |y-q| above."""
    tau = _check_tau(tau)
    u = np.asarray(y, float) - np.asarray(q, float)
    out = 2 * np.where(u >= 0, tau * u, (tau - 1) * u)
    return out if out.ndim else float(out)


def check_loss(u, tau):
    """Unscaled check function rho_tau(u)."""
    u = np.asarray(u, float)
    return np.where(u >= 0, tau * u, (tau - 1) * u)


def rearrange(values):
    """Sort each row so quantiles never cross."""
    return np.sort(np.asarray(values, float), axis=1)


# --------------------------------------------------------------------------
# QuantileForecast
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuantileForecast:
    levels: tuple
    values: np.ndarray
    point: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        levels = tuple(float(t) for t in self.levels)
        _check_tau(levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("levels must be strictly increasing")
        values = np.atleast_2d(np.asarray(self.values, float))
        if values.shape[1] != len(levels):
            raise ValueError(f"{values.shape[1]} value columns for {len(levels)} levels")
        point = np.asarray(self.point, float).reshape(-1)
        if len(point) != len(values):
            raise ValueError("point forecast length differs from quantile rows")
        if self.timestamps is not None and len(self.timestamps) != len(values):
            raise ValueError("timestamp count differs from quantile rows")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "point", point)

    @classmethod
    def from_quantiles(cls, levels, values, timestamps=None, floor: float | None = None):
        """Rearrange, optionally floor, and take the median (or middle level) as point."""
        v = rearrange(values)
        if floor is not None:
            v = np.maximum(v, floor)
        levels = tuple(float(t) for t in levels)
        point = np.array([np.interp(0.5, levels, row) for row in v]) if len(v) else np.empty(0)
        return cls(levels, v, point, timestamps)

    def __len__(self):
        return len(self.values)

    def slice(self, sl):
        ts = None if self.timestamps is None else self.timestamps[sl]
        return QuantileForecast(self.levels, self.values[sl], self.point[sl], ts)

    def level(self, tau):
        return self.values[:, self.levels.index(float(tau))]

    @staticmethod
    def concat(parts):
        parts = list(parts)
        ts = None if any(p.timestamps is None for p in parts) else np.concatenate([p.timestamps for p in parts])
        return QuantileForecast(parts[0].levels, np.vstack([p.values for p in parts]),
                                np.concatenate([p.point for p in parts]), ts)

    def to_csv(self, path, format_timestamp=None):
        from .dataset import format_float, format_timestamp as default_fmt
        fmt = format_timestamp or (lambda t: default_fmt(t, 0))
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp"] + [f"q{t:g}" for t in self.levels] + ["point"])
            for i in range(len(self)):
                ts = "" if self.timestamps is None else fmt(self.timestamps[i])
                w.writerow([ts] + [format_float(v) for v in self.values[i]] + [format_float(self.point[i])])
        return path

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        if header[0] != "timestamp" or header[-1] != "point":
            raise DataError(f"{path}: not a quantile forecast file")
        levels = [float(h[1:]) for h in header[1:-1]]
        body = rows[1:]
        vals = np.array([[float(x) for x in r[1:-1]] for r in body]).reshape(len(body), len(levels))
        point = np.array([float(r[-1]) for r in body])
        ts = None
        if body and body[0][0]:
            ts = np.array([np.datetime64(r[0][:19], "s") for r in body])
        return cls(tuple(levels), vals, point, ts)


# --------------------------------------------------------------------------
# Linear quantile regression
# --------------------------------------------------------------------------

def _with_intercept(X):
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(len(X)), X])


def _independent_columns(A, keep_first=True):
    """Indices of a maximal linearly independent column subset (intercept kept)."""
    if A.shape[1] == 0:
        return np.arange(0)
    _, R, piv = qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = max(A.shape) * np.finfo(float).eps * (diag[0] if len(diag) else 0.0) * 1e3
    rank = int((diag > tol).sum())
    keep = np.sort(piv[:rank])
    if keep_first and 0 not in keep:
        keep = np.sort(np.concatenate([[0], keep[:-1]]))
    return keep


def _irls(A, y, tau, penalty=None, eps0=None, tol=1e-10, max_iter=500):
    """Minimise sum rho_tau(y - A b) + b' P b by majorise-minimise IRLS."""
    n, p = A.shape
    P = np.zeros((p, p)) if penalty is None else penalty
    scale = float(np.mean(np.abs(y - np.median(y)))) or 1.0
    eps = eps0 if eps0 is not None else 1e-2 * scale
    rhs_lin = (2 * tau - 1) * A.sum(axis=0)
    reg = 1e-12 * np.trace(A.T @ A) / p * np.eye(p)
    beta = np.linalg.lstsq(A, y, rcond=None)[0]

    def obj(b):
        return float(check_loss(y - A @ b, tau).sum() + b @ P @ b)

    best, best_obj = beta, obj(beta)
    for _ in range(max_iter):
        r = y - A @ beta
        w = 1.0 / (eps + np.abs(r))
        M = (A * w[:, None]).T @ A + 4 * P + reg
        new = np.linalg.solve(M, A.T @ (w * y) + rhs_lin)
        f = obj(new)
        if f < best_obj:
            best, best_obj = new, f
        change = np.max(np.abs(new - beta)) / (1 + np.max(np.abs(beta)))
        beta = new
        if change < tol:
            if eps <= 1e-9 * scale:
                break
            eps *= 0.1
    return best, best_obj


def _line_min(r, g, tau):
    """Exact minimiser of t -> sum rho_tau(r - t g), returned as (t, index of kink)."""
    nz = g != 0
    idx = np.flatnonzero(nz)
    t = r[nz] / g[nz]
    order = np.argsort(t, kind="stable")
    ag = np.abs(g[nz])[order]
    slope = -tau * g[g > 0].sum() - (1 - tau) * (-g[g < 0]).sum()
    k = int(np.searchsorted(slope + np.cumsum(ag), 0.0))
    k = min(k, len(order) - 1)
    return t[order[k]], idx[order[k]]


def _vertex_descent(A, y, tau, beta, max_pivots=None):
    """Polish an approximate solution to an exact optimal vertex.

    Start from the basis of ``p`` best-fitting observations, then repeatedly
    release one basis observation and slide along the resulting edge to the
    exact minimiser of the (convex, piecewise linear) objective. Stops when no
    edge improves, which for this linear programme is global optimality.
    """
    n, p = A.shape
    order = np.argsort(np.abs(y - A @ beta), kind="stable")
    basis = []
    for i in order:
        trial = basis + [int(i)]
        if np.linalg.matrix_rank(A[trial]) == len(trial):
            basis = trial
        if len(basis) == p:
            break
    if len(basis) < p:
        return beta, float(check_loss(y - A @ beta, tau).sum())
    b = np.linalg.solve(A[basis], y[basis])
    f = float(check_loss(y - A @ b, tau).sum())
    start = float(check_loss(y - A @ beta, tau).sum())
    tol = 1e-13 * max(1.0, f)
    for _ in range(max_pivots or 50 * n):
        Binv = np.linalg.inv(A[basis])
        r = y - A @ b
        for k in range(p):
            d = Binv[:, k]
            g = A @ d
            t, j = _line_min(r, g, tau)
            cand = b + t * d
            fc = float(check_loss(y - A @ cand, tau).sum())
            if fc < f - tol and j not in basis:
                basis[k] = int(j)
                b = np.linalg.solve(A[basis], y[basis])
                f = float(check_loss(y - A @ b, tau).sum())
                break
        else:
            break
    if f <= start:
        return b, f
    return beta, start


def _solve_lqr(A, y, tau, polish=True):
    beta, f = _irls(A, y, tau)
    if polish:
        beta, f = _vertex_descent(A, y, tau, beta)
    return beta


@dataclass(frozen=True)
class LqrModel:
    levels: tuple
    coef: np.ndarray          # (levels, 1 + d); dropped columns hold 0
    dropped: tuple = ()

    def predict(self, X):
        A = _with_intercept(X)
        if A.shape[1] != self.coef.shape[1]:
            raise ValueError(f"expected {self.coef.shape[1] - 1} columns, got {A.shape[1] - 1}")
        return A @ self.coef.T


def fit_lqr(X, y, levels=(0.5,), polish: bool = True) -> LqrModel:
    """Linear quantile regression with intercept, one coefficient row per level."""
    A = _with_intercept(X)
    y = np.asarray(y, float)
    n, p = A.shape
    if n <= p - 1:
        raise ValueError(f"need more observations ({n}) than covariates ({p - 1})")
    keep = _independent_columns(A)
    dropped = tuple(int(j) - 1 for j in range(p) if j not in set(keep))
    if dropped:
        logger.warning("dropping collinear covariate columns %s", dropped)
    coef = np.zeros((len(levels), p))
    for i, tau in enumerate(levels):
        _check_tau(tau)
        coef[i, keep] = _solve_lqr(A[:, keep], y, float(tau), polish)
    return LqrModel(tuple(float(t) for t in levels), coef, dropped)


# --------------------------------------------------------------------------
# Cubic regression splines
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CrBasis:
    """Cubic regression spline parametrised by function values at the knots."""

    knots: np.ndarray
    F: np.ndarray       # maps knot values to knot second derivatives
    S: np.ndarray       # roughness penalty on knot values

    @classmethod
    def build(cls, x, q=10):
        x = np.asarray(x, float)
        uniq = np.unique(x)
        if q < 3:
            raise ConfigError("basis dimension must be at least 3")
        if len(uniq) < q:
            raise ConfigError(f"smooth term has {len(uniq)} distinct values, fewer than basis dimension {q}")
        knots = np.quantile(uniq, np.linspace(0, 1, q))
        knots = np.unique(knots)
        if len(knots) < q:
            knots = np.linspace(uniq[0], uniq[-1], q)
        h = np.diff(knots)
        D = np.zeros((q - 2, q))
        B = np.zeros((q - 2, q - 2))
        for i in range(q - 2):
            D[i, i], D[i, i + 1], D[i, i + 2] = 1 / h[i], -1 / h[i] - 1 / h[i + 1], 1 / h[i + 1]
            B[i, i] = (h[i] + h[i + 1]) / 3
            if i + 1 < q - 2:
                B[i, i + 1] = B[i + 1, i] = h[i + 1] / 6
        BinvD = np.linalg.solve(B, D)
        F = np.vstack([np.zeros(q), BinvD, np.zeros(q)])
        S = D.T @ BinvD
        return cls(knots, F, (S + S.T) / 2)

    @property
    def q(self):
        return len(self.knots)

    def design(self, x):
        x = np.asarray(x, float)
        k, F, q = self.knots, self.F, self.q
        out = np.zeros((len(x), q))
        j = np.clip(np.searchsorted(k, x, side="right") - 1, 0, q - 2)
        h = k[j + 1] - k[j]
        am = (k[j + 1] - x) / h
        ap = (x - k[j]) / h
        cm = ((k[j + 1] - x) ** 3 / h - h * (k[j + 1] - x)) / 6
        cp = ((x - k[j]) ** 3 / h - h * (x - k[j])) / 6
        rows = np.arange(len(x))
        out[rows, j] += am
        out[rows, j + 1] += ap
        out += cm[:, None] * F[j] + cp[:, None] * F[j + 1]
        # linear extrapolation beyond the boundary knots
        lo, hi = x < k[0], x > k[-1]
        if lo.any():
            h0 = k[1] - k[0]
            d0 = -np.eye(q)[0] / h0 + np.eye(q)[1] / h0 - h0 * F[1] / 6
            out[lo] = np.eye(q)[0] + (x[lo] - k[0])[:, None] * d0
        if hi.any():
            h1 = k[-1] - k[-2]
            d1 = (np.eye(q)[-1] - np.eye(q)[-2]) / h1 + h1 * F[-2] / 6
            out[hi] = np.eye(q)[-1] + (x[hi] - k[-1])[:, None] * d1
        return out


@dataclass(frozen=True)
class _Term:
    kind: str                   # "linear" or "smooth"
    column: int
    basis: CrBasis | None = None
    Z: np.ndarray | None = None  # sum-to-zero null space

    def design(self, X):
        x = X[:, self.column]
        if self.kind == "linear":
            return x[:, None]
        return self.basis.design(x) @ self.Z

    @property
    def width(self):
        return 1 if self.kind == "linear" else self.Z.shape[1]


@dataclass(frozen=True)
class AdditiveSpec:
    """Per-column smooth flags, basis dimension and penalty.

    ``penalty`` is either a non-negative float (relative roughness weight) or
    ``"auto"`` for validation on the held-out tail of the training rows.
    """

    smooth: tuple
    q: int = 10
    penalty: float | str = "auto"
    grid: tuple = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
    holdout: float = 0.2

    def __post_init__(self):
        if self.q < 3:
            raise ConfigError("basis dimension must be at least 3")
        if not (self.penalty == "auto" or (isinstance(self.penalty, (int, float)) and self.penalty >= 0)):
            raise ConfigError(f"bad penalty {self.penalty!r}")


@dataclass(frozen=True)
class AdditiveModel:
    levels: tuple
    terms: tuple
    coef: np.ndarray        # (levels, 1 + total width)
    penalties: tuple        # chosen relative penalty per level
    n_features: int

    def design(self, X):
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} columns, got {X.shape[1]}")
        return np.column_stack([np.ones(len(X))] + [t.design(X) for t in self.terms])

    def predict(self, X):
        return self.design(X) @ self.coef.T

    def smooth_value(self, X, column, level_index=0):
        """Contribution of one term (without intercept) at the rows of ``X``."""
        A = self.design(X)
        start = 1
        for t in self.terms:
            if t.column == column:
                return A[:, start:start + t.width] @ self.coef[level_index, start:start + t.width]
            start += t.width
        raise KeyError(column)


def _build_terms(X, smooth, q):
    terms = []
    for j, s in enumerate(smooth):
        if not s:
            terms.append(_Term("linear", j))
            continue
        basis = CrBasis.build(X[:, j], q)
        C = basis.design(X[:, j]).sum(axis=0)[:, None]
        Q, _ = np.linalg.qr(C, mode="complete")
        terms.append(_Term("smooth", j, basis, Q[:, 1:]))
    return tuple(terms)


def _penalty_matrix(terms, A):
    p = A.shape[1]
    P = np.zeros((p, p))
    start = 1
    for t in terms:
        if t.kind == "smooth":
            S = t.Z.T @ t.basis.S @ t.Z
            block = A[:, start:start + t.width]
            S *= np.linalg.norm(block.T @ block) / max(np.linalg.norm(S), 1e-300)
            P[start:start + t.width, start:start + t.width] = S
        start += t.width
    return P


def _fit_penalised(A, y, tau, P, rel):
    if rel == 0 or not P.any():
        keep = _independent_columns(A)
        beta = np.zeros(A.shape[1])
        beta[keep] = _solve_lqr(A[:, keep], y, tau, polish=not P.any())
        return beta
    scale = float(np.mean(np.abs(y - np.median(y)))) or 1.0
    beta, _ = _irls(A, y, tau, penalty=rel * P / (4 * scale))
    return beta


def fit_additive(X, y, spec: AdditiveSpec, levels=(0.5,)) -> AdditiveModel:
    """Additive quantile regression: linear and/or cubic-spline smooth terms per column."""
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float)
    if len(spec.smooth) != X.shape[1]:
        raise ConfigError(f"{len(spec.smooth)} smooth flags for {X.shape[1]} columns")
    terms = _build_terms(X, spec.smooth, spec.q)
    A = np.column_stack([np.ones(len(X))] + [t.design(X) for t in terms])
    P = _penalty_matrix(terms, A)
    coef = np.zeros((len(levels), A.shape[1]))
    chosen = []
    n_fit = len(y) - int(round(spec.holdout * len(y)))
    for i, tau in enumerate(levels):
        tau = float(_check_tau(tau))
        rel = spec.penalty
        if rel == "auto":
            if not P.any():
                rel = 0.0
            else:
                losses = []
                for cand in spec.grid:
                    b = _fit_penalised(A[:n_fit], y[:n_fit], tau, P, cand)
                    losses.append(float(check_loss(y[n_fit:] - A[n_fit:] @ b, tau).mean()))
                rel = spec.grid[int(np.argmin(losses))]
        coef[i] = _fit_penalised(A, y, tau, P, float(rel))
        chosen.append(float(rel))
    return AdditiveModel(tuple(float(t) for t in levels), terms, coef, tuple(chosen), X.shape[1])


def fit_aqr(X, y, spec: AdditiveSpec, levels=(0.5,)) -> AdditiveModel:
    return fit_additive(X, y, spec, levels)


def fit_plaqr(X, y, linear: Sequence[int], smooth: Sequence[int], levels=(0.5,), q=10,
              penalty: float | str = "auto") -> AdditiveModel:
    """Partially linear additive QR: ``linear`` columns enter raw, ``smooth`` via splines."""
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    linear, smooth = set(linear), set(smooth)
    if linear & smooth:
        raise ConfigError("linear and smooth feature sets overlap")
    if linear | smooth != set(range(X.shape[1])):
        raise ConfigError("partition must cover every column exactly once")
    flags = tuple(j in smooth for j in range(X.shape[1]))
    return fit_additive(X, y, AdditiveSpec(flags, q, penalty), levels)


def save_additive(model: AdditiveModel, path) -> Path:
    terms = []
    for t in model.terms:
        d = {"kind": t.kind, "column": t.column}
        if t.kind == "smooth":
            d.update(knots=t.basis.knots.tolist(), F=t.basis.F.tolist(), S=t.basis.S.tolist(), Z=t.Z.tolist())
        terms.append(d)
    doc = {"format_version": 1, "kind": "additive", "levels": list(model.levels), "terms": terms,
           "coef": model.coef.tolist(), "penalties": list(model.penalties), "n_features": model.n_features}
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_additive(path) -> AdditiveModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != "additive" or doc.get("format_version") != 1:
        raise ValueError("unsupported model file")
    terms = []
    for d in doc["terms"]:
        if d["kind"] == "smooth":
            basis = CrBasis(np.array(d["knots"]), np.array(d["F"]), np.array(d["S"]))
            terms.append(_Term("smooth", d["column"], basis, np.array(d["Z"])))
        else:
            terms.append(_Term("linear", d["column"]))
    return AdditiveModel(tuple(doc["levels"]), tuple(terms), np.array(doc["coef"]),
                         tuple(doc["penalties"]), doc["n_features"])


# --------------------------------------------------------------------------
# Quantile regression neural network
# --------------------------------------------------------------------------

def _huber_check(u, tau, eps):
    a = np.abs(u)
    h = np.where(a <= eps, u * u / (2 * eps), a - eps / 2)
    dh = np.where(a <= eps, u / eps, np.sign(u))
    w = np.where(u >= 0, tau, 1 - tau)
    return w * h, w * dh


@dataclass(frozen=True)
class QrnnNet:
    W: np.ndarray
    b: np.ndarray
    v: np.ndarray
    c: float

    def forward(self, Z):
        return self.c + expit(Z @ self.W + self.b) @ self.v


@dataclass(frozen=True)
class QrnnModel:
    levels: tuple
    nets: tuple
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    hidden: int
    penalties: tuple
    card: dict = field(default_factory=dict)

    def predict(self, X):
        X = np.asarray(X, float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != len(self.x_mean):
            raise ValueError(f"expected {len(self.x_mean)} columns, got {X.shape[1]}")
        Z = (X - self.x_mean) / self.x_scale
        return np.column_stack([n.forward(Z) for n in self.nets]) * self.y_scale + self.y_mean


def _unpack_net(theta, d, m):
    W = theta[: d * m].reshape(d, m)
    b = theta[d * m: d * m + m]
    v = theta[d * m + m: d * m + 2 * m]
    return W, b, v, theta[-1]


def _qrnn_objective(theta, Z, y, tau, eps, lam1, lam2, m):
    n, d = Z.shape
    W, b, v, c = _unpack_net(theta, d, m)
    H = expit(Z @ W + b)
    f = c + H @ v
    u = y - f
    if eps > 0:
        loss, dloss = _huber_check(u, tau, eps)
    else:
        loss, dloss = check_loss(u, tau), np.where(u >= 0, tau, tau - 1)
    value = loss.mean() + lam1 * np.sum(W * W) + lam2 * np.sum(v * v)
    g = -dloss / n
    gv = H.T @ g + 2 * lam2 * v
    gc = g.sum()
    gpre = (g[:, None] * v[None, :]) * H * (1 - H)
    gW = Z.T @ gpre + 2 * lam1 * W
    gb = gpre.sum(axis=0)
    return value, np.concatenate([gW.ravel(), gb, gv, [gc]])


def fit_qrnn(X, y, levels=(0.5,), hidden: int = 8, lam1: float = 0.0, lam2: float = 0.0,
             restarts: int = 3, eps_schedule=(1.0, 0.1, 0.01), max_iter: int = 500,
             seed: int = 0) -> QrnnModel:
    """One-hidden-layer sigmoid network per level trained on a smoothed check loss.

    Inputs and target are standardised internally; ``lam1`` and ``lam2`` act
    on the standardised hidden and output weights. Output biases are not
    penalised.
    """
    if hidden < 1:
        raise ValueError("need at least one hidden unit")
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, float)
    n, d = X.shape
    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    x_scale[x_scale == 0] = 1.0
    y_mean = float(y.mean())
    # a constant target still needs a unit; keep the smoothing width negligible
    y_scale = float(y.std()) or 1e-6 * max(1.0, abs(y_mean))
    Z = (X - x_mean) / x_scale
    ys = (y - y_mean) / y_scale
    rng = np.random.default_rng(seed)
    m = hidden
    nets = []
    init_losses, final_losses = [], []
    for tau in levels:
        tau = float(_check_tau(tau))
        best, best_f, init_f = None, np.inf, None
        for r in range(restarts):
            theta = np.concatenate([
                rng.normal(0, 0.5, d * m), rng.normal(0, 0.5, m), rng.normal(0, 0.5, m),
                [float(np.quantile(ys, tau))],
            ])
            f0 = _qrnn_objective(theta, Z, ys, tau, 0.0, lam1, lam2, m)[0]
            if init_f is None:
                init_f = f0
            start = theta
            for eps in eps_schedule:
                res = minimize(_qrnn_objective, theta, args=(Z, ys, tau, eps, lam1, lam2, m),
                               jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
                if np.all(np.isfinite(res.x)) and np.isfinite(res.fun):
                    theta = res.x
            f = _qrnn_objective(theta, Z, ys, tau, 0.0, lam1, lam2, m)[0]
            if not np.isfinite(f):
                continue
            if f > f0:
                theta, f = start, f0
            if f < best_f:
                best, best_f = theta, f
        if best is None:
            raise FitError(f"QRNN training produced no finite loss at level {tau}")
        W, b, v, c = _unpack_net(best, d, m)
        nets.append(QrnnNet(W, b, v, float(c)))
        init_losses.append(float(init_f))
        final_losses.append(float(best_f))
    card = {"init_loss": init_losses, "final_loss": final_losses, "restarts": restarts, "seed": seed}
    return QrnnModel(tuple(float(t) for t in levels), tuple(nets), x_mean, x_scale, y_mean, y_scale,
                     m, (lam1, lam2), card)


# --------------------------------------------------------------------------
# Forecast combination
# --------------------------------------------------------------------------

COMBINERS = ("qra", "qrnn", "plaqr")


def combiner_windows(n: int, train_fraction: float = 0.5):
    """Chronological split of the test window into combiner-training and evaluation."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    s = int(math.floor(n * train_fraction))
    return np.arange(0, s), np.arange(s, n)


@dataclass(frozen=True)
class CombineResult:
    method: str
    names: tuple
    model: object
    forecast: QuantileForecast
    train_index: np.ndarray
    eval_index: np.ndarray


def combine(base: Mapping[str, np.ndarray], actuals, method: str = "qra", levels=DEFAULT_LEVELS,
            train_index=None, eval_index=None, fit_mask=None, timestamps=None,
            floor: float | None = 0.0, options: Mapping | None = None) -> CombineResult:
    """Fit a quantile combiner on base point forecasts and forecast the evaluation window.

    ``fit_mask`` (same length as ``actuals``) removes rows such as night hours
    from the fitting set only. Output quantiles are rearranged and floored.
    """
    if method not in COMBINERS:
        raise ConfigError(f"unknown combiner {method!r}; choose from {COMBINERS}")
    names = tuple(base)
    if not names:
        raise ValueError("no base forecasts supplied")
    y = np.asarray(actuals, float)
    X = np.column_stack([np.asarray(base[k], float) for k in names])
    if len(X) != len(y):
        raise ValueError("base forecasts are not aligned with actuals")
    if train_index is None or eval_index is None:
        train_index, eval_index = combiner_windows(len(y))
    train_index, eval_index = np.asarray(train_index), np.asarray(eval_index)
    if len(np.intersect1d(train_index, eval_index)):
        raise ProtocolError("combiner evaluation window overlaps its training window")
    if len(train_index) and len(eval_index) and train_index.max() >= eval_index.min():
        raise ProtocolError("combiner training window must precede the evaluation window")
    fit_rows = train_index
    if fit_mask is not None:
        fit_rows = train_index[np.asarray(fit_mask, bool)[train_index]]
    opts = dict(options or {})
    Xf, yf = X[fit_rows], y[fit_rows]
    if method == "qra":
        model = fit_lqr(Xf, yf, levels)
    elif method == "qrnn":
        model = fit_qrnn(Xf, yf, levels, **opts)
    else:
        # first base forecast enters linearly, the rest through smooths
        lin = opts.pop("linear", [0])
        smooth = [j for j in range(X.shape[1]) if j not in lin]
        model = fit_plaqr(Xf, yf, lin, smooth, levels, **opts)
    raw = model.predict(X[eval_index])
    ts = None if timestamps is None else np.asarray(timestamps)[eval_index]
    fc = QuantileForecast.from_quantiles(levels, raw, ts, floor=floor)
    return CombineResult(method, names, model, fc, train_index, eval_index)
