"""Point metrics, proper scoring rules under a Gamma predictive, and Murphy curves."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import integrate, special, stats

from .errors import DataError, NumericalError
from .quantile import QuantileForecast, pinball

DEFAULT_SHIFT = 0.01
GAMMA_MODES = ("forecast", "unshifted", "predictive")


class DegenerateDataError(DataError):
    pass


def _pair(y, yhat):
    y = np.asarray(y, float).reshape(-1)
    yhat = np.asarray(yhat, float).reshape(-1)
    if len(y) != len(yhat):
        raise ValueError(f"length mismatch: {len(y)} actuals, {len(yhat)} forecasts")
    if len(y) == 0:
        raise ValueError("empty series")
    return y, yhat


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


# --------------------------------------------------------------------------
# Gamma predictive
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaFit:
    """Gamma law for ``value + shift``; ``shift`` moves zeros inside the support."""

    shape: float
    scale: float
    shift: float = 0.0

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0 and self.shift >= 0):
            raise ValueError(f"invalid Gamma parameters {self}")

    @property
    def mean(self):
        """Mean on the original (unshifted) scale."""
        return self.shape * self.scale - self.shift

    @property
    def sd(self):
        return math.sqrt(self.shape) * self.scale

    @property
    def dist(self):
        return stats.gamma(self.shape, scale=self.scale)

    @classmethod
    def from_moments(cls, mean, sd, shift=0.0):
        m = mean + shift
        if m <= 0 or sd <= 0:
            raise ValueError("moment matching needs positive shifted mean and sd")
        return cls((m / sd) ** 2, sd**2 / m, shift)


def _gamma_loglik(x, k, theta):
    return float(np.sum(stats.gamma.logpdf(x, k, scale=theta)))


def fit_gamma(samples, shift: float = 0.0, max_iter: int = 100) -> GammaFit:
    """Maximum-likelihood Gamma fit to ``samples + shift``.

    Newton iteration on ``log k - digamma(k) = log mean - mean log``, started
    at the moment estimator.
    """
    x = np.asarray(samples, float) + shift
    if len(x) < 10:
        raise DegenerateDataError(f"need at least 10 samples, got {len(x)}")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise DegenerateDataError("shifted samples must be finite and positive")
    m, v = x.mean(), x.var(ddof=1)
    if not v > 0:
        raise DegenerateDataError("samples have zero variance")
    s = math.log(m) - float(np.mean(np.log(x)))
    k0 = m * m / v
    k = k0
    for _ in range(max_iter):
        g = math.log(k) - special.digamma(k) - s
        dg = 1 / k - special.polygamma(1, k)
        step = g / dg
        new = k - step
        if new <= 0:
            new = k / 2
        if abs(new - k) <= 1e-12 * k:
            k = new
            break
        k = new
    fit = GammaFit(float(k), float(m / k), shift)
    if _gamma_loglik(x, fit.shape, fit.scale) < _gamma_loglik(x, k0, v / m):
        # cannot happen at the true optimum; keep the better of the two
        fit = GammaFit(float(k0), float(v / m), shift)
    return fit


def _crps_quad(F: GammaFit, y):
    z = y + F.shift
    d = F.dist
    a, b = float(d.ppf(1e-13)), float(d.isf(1e-13))
    cdf = d.cdf

    def q(f, lo, hi):
        if hi <= lo:
            return 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, _ = integrate.quad(f, lo, hi, epsabs=1e-7, epsrel=1e-9, limit=500)
            except integrate.IntegrationWarning as exc:
                raise NumericalError(f"CRPS quadrature did not converge: {exc}") from exc
        return val

    low = lambda t: cdf(t) ** 2
    high = lambda t: (1 - cdf(t)) ** 2
    if z <= a:
        return (a - z) + q(high, a, b)
    if z >= b:
        return q(low, a, b) + (z - b)
    return q(low, a, z) + q(high, z, b)


def _crps_closed(F: GammaFit, y):
    z = y + F.shift
    k, th = F.shape, F.scale
    if z <= 0:
        return k * th - z - th / special.beta(0.5, k)
    return (z * (2 * special.gammainc(k, z / th) - 1)
            - k * th * (2 * special.gammainc(k + 1, z / th) - 1)
            - th / special.beta(0.5, k))


def crps(F: GammaFit, y, method: str = "quad"):
    """Continuous ranked probability score of a Gamma predictive at ``y``.

    ``method="closed"`` uses the analytic expression (agrees with the
    quadrature to its tolerance); it is much faster on long series.
    """
    ys = np.asarray(y, float)
    if not np.all(np.isfinite(ys)):
        raise ValueError("observation must be finite")
    f = _crps_quad if method == "quad" else _crps_closed
    if ys.ndim == 0:
        return float(f(F, float(ys)))
    return np.array([f(F, float(v)) for v in ys])


def logs(F: GammaFit, y):
    """Negative log density; +inf at or below the support boundary."""
    z = np.asarray(y, float) + F.shift
    with np.errstate(divide="ignore"):
        out = np.where(z > 0, -stats.gamma.logpdf(np.where(z > 0, z, 1.0), F.shape, scale=F.scale), np.inf)
    return float(out) if out.ndim == 0 else out


def dss(mu, sigma, y):
    mu, sigma, y = (np.asarray(a, float) for a in (mu, sigma, y))
    if np.any(sigma <= 0):
        raise ValueError("predictive standard deviation must be positive")
    out = ((y - mu) / sigma) ** 2 + 2 * np.log(sigma)
    return float(out) if out.ndim == 0 else out


def pl(forecast: QuantileForecast, y) -> float:
    """Mean factor-2 pinball loss over times and levels."""
    y = np.asarray(y, float).reshape(-1)
    if len(y) != len(forecast):
        raise ValueError(f"{len(forecast)} forecast rows for {len(y)} actuals")
    if len(y) == 0:
        raise ValueError("empty series")
    losses = [pinball(y, forecast.values[:, j], t) for j, t in enumerate(forecast.levels)]
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# Murphy diagrams
# --------------------------------------------------------------------------

def elementary_score(q, y, theta, tau):
    """Extremal score for the tau-quantile; integrates over theta to the check loss."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    q, y, theta = np.broadcast_arrays(*(np.asarray(a, float) for a in (q, y, theta)))
    out = ((y < q).astype(float) - tau) * ((theta < q).astype(float) - (theta < y).astype(float))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MurphyCurve:
    name: str
    tau: float
    thetas: np.ndarray
    mean_scores: np.ndarray


def murphy_grid(series, y, grid_size=101):
    vals = np.concatenate([np.asarray(y, float)] + [np.asarray(s, float) for s in series])
    return np.linspace(vals.min(), vals.max(), grid_size)


def murphy(forecasts: Mapping[str, np.ndarray], y, tau: float = 0.5, grid_size: int = 101,
           thetas=None) -> dict:
    y = np.asarray(y, float)
    if len(y) == 0 or not forecasts:
        raise ValueError("empty series")
    for k, f in forecasts.items():
        if len(f) != len(y):
            raise ValueError(f"forecast {k!r} not aligned with actuals")
    if thetas is None:
        thetas = murphy_grid(forecasts.values(), y, grid_size)
    out = {}
    for name, f in forecasts.items():
        f = np.asarray(f, float)
        s = elementary_score(f[None, :], y[None, :], thetas[:, None], tau)
        out[name] = MurphyCurve(name, tau, thetas, s.mean(axis=1))
    return out


def murphy_difference(a: MurphyCurve, b: MurphyCurve) -> np.ndarray:
    if not np.array_equal(a.thetas, b.thetas):
        raise ValueError("curves use different threshold grids")
    return a.mean_scores - b.mean_scores


def write_murphy_csv(curves: Mapping[str, MurphyCurve], path):
    from .dataset import format_float
    names = list(curves)
    thetas = curves[names[0]].thetas
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta"] + names)
        for i, t in enumerate(thetas):
            w.writerow([format_float(t)] + [format_float(curves[n].mean_scores[i]) for n in names])
    return Path(path)


# --------------------------------------------------------------------------
# Score report
# --------------------------------------------------------------------------

SCORE_COLUMNS = ("Model", "MAE", "RMSE", "CRPS", "LogS", "DSS", "PL", "zero_density")


@dataclass
class ScoreReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def row(self, name):
        for r in self.rows:
            if r["Model"] == name:
                return r
        raise KeyError(name)

    def to_csv(self, path):
        from .dataset import format_float
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCORE_COLUMNS)
            for r in self.rows:
                w.writerow([r["Model"]] + [format_float(r[c]) if c != "zero_density" else str(r[c])
                                           for c in SCORE_COLUMNS[1:]])
        return Path(path)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = []
            for r in reader:
                rows.append({c: (r[c] if c == "Model" else int(r[c]) if c == "zero_density"
                                 else float(r[c]) if r[c] else float("nan")) for c in SCORE_COLUMNS})
        return cls(rows)


def _predictive_sd(fc: QuantileForecast):
    """Spread implied by the 5%-95% (or widest available) interval under normality."""
    lo, hi = fc.levels[0], fc.levels[-1]
    width = fc.values[:, -1] - fc.values[:, 0]
    z = stats.norm.ppf(hi) - stats.norm.ppf(lo)
    return width / z


def score_model(name: str, fc: QuantileForecast, y, mode: str = "forecast",
                shift: float = DEFAULT_SHIFT) -> dict:
    """One ScoreReport row.

    ``mode="forecast"`` fits one Gamma law to the model's point forecasts
    (plus ``shift``) and scores every actual against it; ``"unshifted"`` does
    the same with no shift, dropping non-positive forecasts from the fit, so
    zero actuals score LogS = inf; ``"predictive"`` moment-matches a Gamma to
    each time's predictive mean and spread.
    """
    if mode not in GAMMA_MODES:
        raise ValueError(f"unknown Gamma mode {mode!r}")
    y = np.asarray(y, float)
    point = fc.point
    row = {"Model": name, "MAE": mae(y, point), "RMSE": rmse(y, point), "PL": pl(fc, y)}
    if mode == "predictive":
        sd = np.maximum(_predictive_sd(fc), 1e-6)
        mean = np.maximum(point, 0.0)
        c, lg, ds = [], [], []
        for m, s, v in zip(mean, sd, y):
            F = GammaFit.from_moments(m, s, shift)
            c.append(_crps_closed(F, v))
            lg.append(logs(F, v))
            ds.append(dss(F.mean, F.sd, v))
        c, lg, ds = np.array(c), np.array(lg), np.array(ds)
    else:
        eps = shift if mode == "forecast" else 0.0
        sample = point if mode == "forecast" else point[point > 0]
        sample = np.maximum(sample, 0.0) if mode == "forecast" else sample
        F = fit_gamma(sample, eps)
        c = crps(F, y, method="closed")
        lg = logs(F, y)
        ds = dss(F.mean, F.sd, y)
    row["CRPS"] = float(np.mean(c))
    row["LogS"] = float(np.mean(lg))
    row["DSS"] = float(np.mean(ds))
    row["zero_density"] = int(np.sum(~np.isfinite(lg)))
    return row


def score_report(forecasts: Mapping[str, QuantileForecast], y, mode: str = "forecast",
                 shift: float = DEFAULT_SHIFT, meta=None) -> ScoreReport:
    rows = [score_model(n, f, y, mode, shift) for n, f in forecasts.items()]
    m = {"gamma_mode": mode, "shift": shift if mode != "unshifted" else 0.0}
    m.update(meta or {})
    return ScoreReport(rows, m)
