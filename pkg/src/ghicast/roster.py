"""Uniform fit / persist / forecast wrappers around the individual models.

Every member is fitted on the training frame only and produces quantile
forecasts over an input frame whose rows are grouped into forecast blocks.
Members that learn from the GHI history (the structural time series) filter
causally through the realised test values; all others map covariates to
forecasts row by row.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from . import bsts, dgp, gbr, gp
from . import dataset as ds
from .errors import ConfigError
from .quantile import AdditiveSpec, fit_aqr, load_additive, save_additive

logger = logging.getLogger(__name__)

KINDS = ("gp", "dgp", "bsts", "gbr", "aqr")
DEFAULT_KIND = {"gpr": "gp", "gp": "gp", "dgp": "dgp", "bsts": "bsts", "bsts_long": "bsts",
                "bsts_short": "bsts", "gbr": "gbr", "gbm": "gbr", "aqr": "aqr"}

DEFAULT_OPTIONS = {
    "gp": {"restarts": 3, "max_iter": 60, "max_n": 4000, "subsample": 2000, "ard": False},
    "dgp": {"iters": 1000, "burn_in": 500, "thin": 10, "max_n": 250, "step": 0.1, "p": None},
    "bsts": {"iters": 2000, "burn_in": 500, "thin": 1, "window_hours": None, "seasonal": 24,
             "slope": True, "max_draws": 100, "expected_r2": 0.5, "inclusion": 0.5},
    "gbr": {"n_trees": 500, "max_depth": 3, "learning_rate": 0.1, "min_leaf": 5, "subsample": 1.0},
    "aqr": {"q": 10, "penalty": "auto"},
}
NAME_OPTIONS = {"bsts_short": {"window_hours": 720}}


def kind_of(name: str, options: dict | None = None) -> str:
    kind = (options or {}).get("kind") or DEFAULT_KIND.get(name)
    if kind not in KINDS:
        raise ConfigError(f"cannot tell which model {name!r} is; set its 'kind' to one of {KINDS}")
    return kind


def member_options(name: str, options: dict | None = None) -> dict:
    """Defaults for the model kind, then name-specific defaults, then user options."""
    user = dict(options or {})
    kind = kind_of(name, user)
    merged = dict(DEFAULT_OPTIONS[kind])
    merged.update(NAME_OPTIONS.get(name, {}))
    unknown = set(user) - set(merged) - {"kind"}
    if unknown:
        raise ConfigError(f"unknown option(s) for {name}: {', '.join(sorted(unknown))}")
    merged.update({k: v for k, v in user.items() if k != "kind"})
    merged["kind"] = kind
    return merged


def member_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % 2**32


def gaussian_quantiles(mean, sd, levels):
    z = stats.norm.ppf(np.asarray(levels, float))
    return np.asarray(mean, float)[:, None] + np.asarray(sd, float)[:, None] * z[None, :]


def block_starts(n: int, horizon: int) -> np.ndarray:
    start = np.zeros(n, bool)
    start[::horizon] = True
    return start


@dataclass
class Member:
    name: str
    kind: str
    features: tuple
    scaler: ds.Scaler | None
    model: object
    options: dict
    seed: int
    train_start: str = ""
    train_end: str = ""
    n_train: int = 0
    extras: dict = field(default_factory=dict)

    def design(self, frame: ds.TimeSeriesFrame):
        if not self.features:
            return np.empty((len(frame), 0))
        return self.scaler.transform(frame)

    def forecast(self, inputs: ds.TimeSeriesFrame, block_start, horizon: int, levels) -> np.ndarray:
        """Raw quantiles (rows x levels) over ``inputs``.

        ``inputs`` carries the covariates to condition on; its GHI column is
        only read by members that filter through the history, and only up to
        each block's origin.
        """
        X = self.design(inputs)
        if self.kind == "gp":
            m, v = gp.predict(self.model, X)
            return gaussian_quantiles(m, np.sqrt(np.maximum(v, 0)), levels)
        if self.kind == "dgp":
            means, variances = dgp.draw_moments(self.model, X)
            return bsts.mixture_quantiles(means, np.sqrt(np.maximum(variances, 1e-12)),
                                          np.full(len(means), 1.0 / len(means)), levels)
        if self.kind == "gbr":
            return gaussian_quantiles(self.model.predict(X), np.full(len(X), self.extras["residual_sd"]), levels)
        if self.kind == "aqr":
            return self.model.predict(X)
        mix = bsts.rolling_moments(self.model, X if self.features else None, inputs.ghi, block_start,
                                   horizon, self.options["max_draws"])
        return mix.quantiles(levels)


def fit_member(name: str, train: ds.TimeSeriesFrame, features: Sequence[str], options: dict | None,
               seed: int, levels) -> Member:
    opts = member_options(name, options)
    kind = opts["kind"]
    features = tuple(features)
    s = member_seed(seed, name)
    extras = {}
    frame = train
    if kind == "bsts" and opts["window_hours"]:
        frame = train[max(0, len(train) - int(opts["window_hours"])):]
    X, y, scaler = ds.design_matrix(frame, features)
    if kind == "gp":
        budget = gp.OptimizerBudget(opts["restarts"], opts["max_iter"], opts["max_n"], opts["subsample"],
                                    opts["ard"], s)
        model = gp.fit(X, y, opt=budget)
    elif kind == "dgp":
        cfg = dgp.SamplerConfig(opts["iters"], opts["burn_in"], opts["thin"], opts["step"], opts["max_n"], s)
        model = dgp.fit(X, y, opts["p"], cfg)
    elif kind == "gbr":
        cfg = gbr.GbrConfig(opts["n_trees"], opts["max_depth"], opts["learning_rate"], opts["min_leaf"],
                            opts["subsample"], s)
        model = gbr.fit(X, y, cfg)
        extras["residual_sd"] = float(np.std(y - model.predict(X), ddof=1))
    elif kind == "aqr":
        q = int(opts["q"])
        smooth = tuple(len(np.unique(X[:, j])) >= q for j in range(X.shape[1]))
        model = fit_aqr(X, y, AdditiveSpec(smooth, q, opts["penalty"]), levels)
    else:
        spec = bsts.StateSpaceSpec.build(level=True, slope=opts["slope"], seasonal=opts["seasonal"])
        prior = bsts.SpikeSlabPrior.default(X, y, expected_r2=opts["expected_r2"], inclusion=opts["inclusion"])
        mcmc = bsts.McmcConfig(opts["iters"], opts["burn_in"], opts["thin"], s)
        model = bsts.fit_arrays(y, X if features else None, spec, prior if features else None, mcmc,
                                features=features)
    return Member(name, kind, features, scaler, model, opts, s, str(frame.timestamps[0]),
                  str(frame.timestamps[-1]), len(frame), extras)


def save_member(member: Member, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if member.kind == "gp":
        gp.save_model(member.model, d / "model.npz")
    elif member.kind == "dgp":
        dgp.save_model(member.model, d / "model.npz")
    elif member.kind == "gbr":
        gbr.save_model(member.model, d / "model.json")
    elif member.kind == "aqr":
        save_additive(member.model, d / "model.json")
    else:
        bsts.save_model(member.model, d / "draws")
    info = {"name": member.name, "kind": member.kind, "features": list(member.features),
            "scaler": member.scaler.to_dict() if member.scaler else None, "options": member.options,
            "seed": member.seed, "train_start": member.train_start, "train_end": member.train_end,
            "n_train": member.n_train, "extras": member.extras}
    (d / "info.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return d


def load_member(directory) -> Member:
    d = Path(directory)
    info = json.loads((d / "info.json").read_text())
    kind = info["kind"]
    if kind == "gp":
        model = gp.load_model(d / "model.npz")
    elif kind == "dgp":
        model = dgp.load_model(d / "model.npz")
    elif kind == "gbr":
        model = gbr.load_model(d / "model.json")
    elif kind == "aqr":
        model = load_additive(d / "model.json")
    else:
        model = bsts.load_model(d / "draws")
    scaler = ds.Scaler.from_dict(info["scaler"]) if info["scaler"] else None
    return Member(info["name"], kind, tuple(info["features"]), scaler, model, info["options"], info["seed"],
                  info["train_start"], info["train_end"], info["n_train"], info["extras"])
