"""Sequential convex aggregation of expert forecasts.

The mixture holds weights over ``K`` experts and updates them by
exponential weighting of realised losses. With ``eta="auto"`` the learning
rate follows ``sqrt(8 ln K / t) / B`` where ``B`` is the largest loss seen so
far rounded up to a power of two (doubling trick on the loss range).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .quantile import QuantileForecast, pinball

logger = logging.getLogger(__name__)

LOSSES = ("square", "pinball")
VARIANTS = ("ewa", "fixed_share")


@dataclass(frozen=True)
class ExpertMixture:
    experts: tuple
    weights: np.ndarray
    loss: str = "square"
    tau: float = 0.5
    eta: float | str = "auto"
    variant: str = "ewa"
    share: float = 0.01
    prior: np.ndarray | None = None
    cum_loss: np.ndarray | None = None
    t: int = 0
    loss_bound: float = 0.0

    @property
    def K(self):
        return len(self.experts)


def init(experts: Sequence[str], prior_weights=None, loss="square", tau=0.5, eta="auto",
         variant="ewa", share=0.01) -> ExpertMixture:
    experts = tuple(experts)
    K = len(experts)
    if K < 1:
        raise ValueError("need at least one expert")
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if eta != "auto" and not (isinstance(eta, (int, float)) and eta >= 0):
        raise ValueError("eta must be non-negative or 'auto'")
    if prior_weights is None:
        w = np.full(K, 1.0 / K)
    else:
        w = np.asarray(prior_weights, float)
        if w.shape != (K,) or np.any(w < 0):
            raise ValueError("prior weights must be a non-negative vector with one entry per expert")
        if abs(w.sum() - 1) > 1e-12:
            raise ValueError("prior weights must sum to one")
    return ExpertMixture(experts, w, loss, float(tau), eta, variant, float(share), w.copy(), np.zeros(K), 0, 0.0)


def _values(mix, expert_values):
    x = np.asarray(expert_values, float).reshape(-1)
    if len(x) != mix.K:
        raise ValueError(f"expected {mix.K} expert values, got {len(x)}")
    return x


def predict(mix: ExpertMixture, expert_values) -> float:
    x = _values(mix, expert_values)
    out = float(mix.weights @ x)
    # guard the convex hull against rounding
    return min(max(out, float(x.min())), float(x.max()))


def _losses(mix, x, actual):
    if mix.loss == "square":
        return (x - actual) ** 2
    return pinball(actual, x, mix.tau)


def _normalise_log(logw):
    m = np.max(logw)
    w = np.exp(logw - m)
    return w / w.sum()


def update(mix: ExpertMixture, expert_values, actual) -> ExpertMixture:
    x = _values(mix, expert_values)
    ell = _losses(mix, x, float(actual))
    if not np.all(np.isfinite(ell)):
        logger.warning("non-finite loss at step %d; update skipped", mix.t + 1)
        return mix
    t = mix.t + 1
    cum = mix.cum_loss + ell
    bound = mix.loss_bound
    top = float(ell.max())
    if top > bound:
        bound = 2.0 ** math.ceil(math.log2(top)) if top > 0 else 0.0
    if mix.eta == "auto":
        eta = math.sqrt(8 * math.log(mix.K) / t) / bound if bound > 0 else 0.0
    else:
        eta = float(mix.eta)
    with np.errstate(divide="ignore"):
        if mix.variant == "ewa":
            w = _normalise_log(np.log(mix.prior) - eta * cum)
        else:
            w = _normalise_log(np.log(mix.weights) - eta * ell)
            w = (1 - mix.share) * w + mix.share / mix.K
    w = w / w.sum()
    return replace(mix, weights=w, cum_loss=cum, t=t, loss_bound=bound)


def run(experts: Mapping[str, np.ndarray], actuals, **kw):
    """Aggregate a whole stream; returns ``(forecasts, weights)``.

    ``weights[t]`` are the weights used for the forecast at ``t`` (set before
    ``actuals[t]`` is revealed).
    """
    names = tuple(experts)
    X = np.column_stack([np.asarray(experts[n], float) for n in names])
    y = np.asarray(actuals, float)
    if len(X) != len(y):
        raise ValueError("experts and actuals are not aligned")
    mix = init(names, **kw)
    preds = np.empty(len(y))
    W = np.empty((len(y), len(names)))
    for i in range(len(y)):
        W[i] = mix.weights
        preds[i] = predict(mix, X[i])
        mix = update(mix, X[i], y[i])
    return preds, W


def aggregate_quantiles(forecasts: Mapping[str, QuantileForecast], actuals, floor: float | None = 0.0,
                        **kw) -> tuple[QuantileForecast, dict]:
    """Level-wise pinball aggregation of quantile forecasts, then rearranged."""
    names = tuple(forecasts)
    first = forecasts[names[0]]
    levels = first.levels
    cols, weights = [], {}
    for j, tau in enumerate(levels):
        preds, W = run({n: forecasts[n].values[:, j] for n in names}, actuals, loss="pinball", tau=tau, **kw)
        cols.append(preds)
        weights[tau] = W
    fc = QuantileForecast.from_quantiles(levels, np.column_stack(cols), first.timestamps, floor=floor)
    return fc, weights


def write_weights(names, W, path) -> Path:
    from .dataset import format_float
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(names))
        for i, row in enumerate(W):
            w.writerow([i] + [format_float(v) for v in row])
    return Path(path)
