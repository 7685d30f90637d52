"""Batch workflow: ingest, select, fit, rolling forecast, combine, score, report.

Each stage reads what the previous stages left in the output directory and
writes its own artifacts there, so stages can be rerun one at a time from
the command line or chained by :func:`run`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aggregate, roster, scoring, svg, varsel
from . import dataset as ds
from .errors import ConfigError, DataError, GhicastError, ProtocolError
from .gbr import GbrConfig
from .quantile import COMBINERS, DEFAULT_LEVELS, QuantileForecast, combine, combiner_windows

logger = logging.getLogger(__name__)

STAGES = ("ingest", "select", "fit", "forecast", "combine", "score", "murphy", "report")
DEFAULT_ROSTER = ("gpr", "dgp", "bsts_long", "bsts_short", "gbr", "aqr")
ALL_COMBINERS = COMBINERS + ("opera",)
COVARIATE_MODES = ("realized", "persistence")
NIGHT_POLICIES = ("include", "exclude")


def _defaults_data():
    return {"path": None, "url": None, "window": None, "utc_offset": None, "schema": None,
            "max_interp_hours": 2, "max_drop_fraction": 0.5}


def _defaults_selection():
    return {"method": "gbr", "compare": list(varsel.METHODS), "candidates": list(ds.COVARIATES),
            "features": None, "alpha_mix": 0.5, "folds": 5}


def _defaults_scoring():
    return {"gamma_mode": "forecast", "shift": scoring.DEFAULT_SHIFT, "night_policy": "include",
            "murphy_tau": 0.5}


@dataclass
class PipelineConfig:
    data: dict = field(default_factory=_defaults_data)
    split_ratio: float = 0.8
    selection: dict = field(default_factory=_defaults_selection)
    models: tuple = DEFAULT_ROSTER
    model_options: dict = field(default_factory=dict)
    horizon: int = 48
    covariates: str = "realized"
    combiners: tuple = ALL_COMBINERS
    combine_base: tuple = ("gpr", "bsts_long")
    combine_train_fraction: float = 0.5
    levels: tuple = DEFAULT_LEVELS
    scoring: dict = field(default_factory=_defaults_scoring)
    output: str = "ghicast-out"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> PipelineConfig:
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")
        base = cls()
        kw = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            v = doc[f.name]
            default = getattr(base, f.name)
            if f.name in ("data", "selection", "scoring"):
                if not isinstance(v, dict):
                    raise ConfigError(f"{f.name} must be an object")
                extra = set(v) - set(default)
                if extra:
                    raise ConfigError(f"unknown {f.name} key(s): {', '.join(sorted(extra))}")
                v = {**default, **v}
            elif isinstance(default, tuple):
                if not isinstance(v, list):
                    raise ConfigError(f"{f.name} must be a list")
                v = tuple(v)
            kw[f.name] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> PipelineConfig:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"configuration file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def validate(self):
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ConfigError("horizon must be a positive integer")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if not self.models:
            raise ConfigError("model roster is empty")
        if len(set(self.models)) != len(self.models):
            raise ConfigError("model names must be unique")
        for name in self.models:
            roster.member_options(name, self.model_options.get(name))
        extra = set(self.model_options) - set(self.models)
        if extra:
            raise ConfigError(f"options given for models outside the roster: {', '.join(sorted(extra))}")
        bad = [c for c in self.combiners if c not in ALL_COMBINERS]
        if bad:
            raise ConfigError(f"unknown combiner(s) {bad}; choose from {ALL_COMBINERS}")
        if self.combiners:
            missing = [b for b in self.combine_base if b not in self.models]
            if missing or not self.combine_base:
                raise ConfigError(f"combination base models must be in the roster (missing: {missing})")
        if not 0 < self.combine_train_fraction < 1:
            raise ConfigError("combine_train_fraction must lie in (0, 1)")
        if self.covariates not in COVARIATE_MODES:
            raise ConfigError(f"covariates must be one of {COVARIATE_MODES}")
        lv = [float(t) for t in self.levels]
        if not lv or any(not 0 < t < 1 for t in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConfigError("levels must be strictly increasing inside (0, 1)")
        sel = self.selection
        if sel["method"] not in varsel.METHODS:
            raise ConfigError(f"selection method must be one of {varsel.METHODS}")
        if any(m not in varsel.METHODS for m in sel["compare"]):
            raise ConfigError(f"selection comparisons must be drawn from {varsel.METHODS}")
        unknown = [f for f in list(sel["candidates"]) + list(sel["features"] or []) if f not in ds.available_features()]
        if unknown:
            raise ConfigError(f"unknown feature(s): {unknown}")
        sc = self.scoring
        if sc["gamma_mode"] not in scoring.GAMMA_MODES:
            raise ConfigError(f"gamma_mode must be one of {scoring.GAMMA_MODES}")
        if sc["night_policy"] not in NIGHT_POLICIES:
            raise ConfigError(f"night_policy must be one of {NIGHT_POLICIES}")
        if sc["shift"] < 0:
            raise ConfigError("Gamma shift must be non-negative")
        if not 0 < sc["murphy_tau"] < 1:
            raise ConfigError("murphy_tau must lie in (0, 1)")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def to_dict(self) -> dict:
        """Every setting spelled out, including per-model defaults."""
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["model_options"] = {n: roster.member_options(n, self.model_options.get(n)) for n in self.models}
        return d


# --------------------------------------------------------------------------
# Rolling forecasts
# --------------------------------------------------------------------------

def forecast_blocks(n: int, horizon: int) -> list[slice]:
    """Consecutive forecast blocks of ``horizon`` rows; the last may be shorter."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    if n < horizon:
        logger.warning("test window (%d rows) is shorter than the horizon (%d); one truncated block", n, horizon)
    return [slice(a, min(a + horizon, n)) for a in range(0, n, horizon)]


def persistence_inputs(history: ds.TimeSeriesFrame, test: ds.TimeSeriesFrame, horizon: int):
    """Covariates for each block copied from the last day before its origin, hour by hour."""
    full = ds.TimeSeriesFrame.concat([history, test])
    cov = np.array(test.covariates)
    h0 = len(history)
    for blk in forecast_blocks(len(test), horizon):
        origin = h0 + blk.start
        if origin < 24:
            raise DataError("persistence covariates need a full day of history before the first origin")
        for j in range(blk.stop - blk.start):
            cov[blk.start + j] = full.covariates[origin - 24 + j % 24]
    return test.with_values(covariates=cov)


def rolling_forecast(member: roster.Member, history: ds.TimeSeriesFrame, test: ds.TimeSeriesFrame,
                     horizon: int = 48, levels=DEFAULT_LEVELS, covariates: str = "realized") -> QuantileForecast:
    """Stitched block forecasts over the test window.

    Each block only sees covariates supplied for that block and GHI values
    before its origin.
    """
    blocks = forecast_blocks(len(test), horizon)
    starts = np.zeros(len(test), bool)
    starts[[b.start for b in blocks]] = True
    inputs = test if covariates == "realized" else persistence_inputs(history, test, horizon)
    raw = member.forecast(inputs, starts, horizon, levels)
    return QuantileForecast.from_quantiles(levels, raw, test.timestamps, floor=0.0)


def night_hours(train: ds.TimeSeriesFrame) -> np.ndarray:
    """Hours of day with no recorded irradiance anywhere in the training window."""
    hours = train.hours
    return np.array([h for h in range(24) if (hours == h).any() and train.ghi[hours == h].max() <= 0], int)


# --------------------------------------------------------------------------
# Workspace
# --------------------------------------------------------------------------

class Workspace:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    clean_csv = property(lambda self: self.path("data", "clean.csv"))
    selection_json = property(lambda self: self.path("selection", "selection.json"))
    scores_csv = property(lambda self: self.path("scores.csv"))
    combined_scores_csv = property(lambda self: self.path("combined", "scores.csv"))
    manifest = property(lambda self: self.path("manifest.json"))
    failed = property(lambda self: self.path("FAILED"))

    def forecast_csv(self, name):
        return self.path("forecasts", f"{name}.csv")

    def combined_csv(self, name):
        return self.path("combined", f"{name}.csv")

    def model_dir(self, name):
        return self.path("models", name, "info.json").parent

    def read_manifest(self) -> dict:
        if self.manifest.exists():
            return json.loads(self.manifest.read_text())
        return {}

    def update_manifest(self, **entries):
        doc = self.read_manifest()
        doc.update(entries)
        self.manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} is missing; run the '{stage}' stage first")
    return path


def _load_split(cfg, ws):
    frame = ds.load_csv(_require(ws.clean_csv, "ingest"))
    return ds.split(frame, cfg.split_ratio)


def _fmt_ts(frame):
    return lambda t: ds.format_timestamp(t, frame.utc_offset)


def _load_forecasts(ws, names):
    out = {}
    for n in names:
        out[n] = QuantileForecast.from_csv(_require(ws.forecast_csv(n), "forecast"))
    return out


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_ingest(cfg: PipelineConfig, ws: Workspace):
    src = cfg.data
    if src["path"] and src["url"]:
        raise ConfigError("give either data.path or data.url, not both")
    info = {}
    if src["url"]:
        raw = ds.fetch_remote(src["url"], tuple(src["window"]) if src["window"] else None,
                              schema=src["schema"], utc_offset=src["utc_offset"])
        info["source"] = src["url"]
    else:
        path = Path(src["path"]) if src["path"] else ds.bundled_synthetic_path()
        raw = ds.load_csv(path, src["schema"], src["utc_offset"])
        info["source"] = str(path) if src["path"] else "bundled:synthetic_30d.csv"
        info["sha256"] = hashlib.sha256(path.read_bytes()).hexdigest()
    report = ds.CleanReport()
    frame = ds.clean(raw, ds.GapPolicy(src["max_interp_hours"], src["max_drop_fraction"]), report)
    ds.write_csv(frame, ws.clean_csv)
    info.update(rows_raw=len(raw), rows_clean=len(frame), clean_report=asdict(report),
                segments=len(ds.segments(frame)))
    ws.update_manifest(data=info)
    return frame


def stage_select(cfg: PipelineConfig, ws: Workspace):
    split = _load_split(cfg, ws)
    sel = cfg.selection
    scfg = varsel.SelectConfig(tuple(sel["candidates"]), sel["alpha_mix"], sel["folds"],
                               gbr=GbrConfig(seed=roster.member_seed(cfg.seed, "varsel")))
    methods = list(dict.fromkeys(list(sel["compare"]) + [sel["method"]]))
    results = [varsel.select(m, split, scfg) for m in methods]
    varsel.write_results(results, ws.path("selection", "selection.csv"), ws.path("selection", "methods.json"))
    chosen = next(r for r in results if r.method == sel["method"])
    features = list(sel["features"]) if sel["features"] else list(chosen.selected)
    doc = {"method": sel["method"], "features": features, "overridden": bool(sel["features"]),
           "mae": {r.method: r.mae for r in results}}
    ws.selection_json.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    ws.update_manifest(selection=doc)
    return results


def _features(ws) -> list:
    return json.loads(_require(ws.selection_json, "select").read_text())["features"]


def _audit_entry(name, train_start, train_end, eval_start, eval_end):
    ok = str(train_end) < str(eval_start)
    return {"object": name, "train_start": str(train_start), "train_end": str(train_end),
            "eval_start": str(eval_start), "eval_end": str(eval_end), "train_precedes_eval": ok}


def stage_fit(cfg: PipelineConfig, ws: Workspace):
    split = _load_split(cfg, ws)
    features = _features(ws)
    audit = []
    for name in cfg.models:
        t = time.perf_counter()
        member = roster.fit_member(name, split.train, features, cfg.model_options.get(name), cfg.seed, cfg.levels)
        roster.save_member(member, ws.model_dir(name))
        logger.info("fitted %s in %.1fs", name, time.perf_counter() - t)
        entry = _audit_entry(name, member.train_start, member.train_end, split.test.timestamps[0],
                             split.test.timestamps[-1])
        if not entry["train_precedes_eval"]:
            raise ProtocolError(f"{name}: training data overlaps the evaluation window")
        audit.append(entry)
    ws.update_manifest(audit_models=audit)


def stage_forecast(cfg: PipelineConfig, ws: Workspace):
    split = _load_split(cfg, ws)
    out = {}
    for name in cfg.models:
        member = roster.load_member(_require(ws.model_dir(name) / "info.json", "fit").parent)
        fc = rolling_forecast(member, split.train, split.test, cfg.horizon, cfg.levels, cfg.covariates)
        fc.to_csv(ws.forecast_csv(name), _fmt_ts(split.test))
        out[name] = fc
    blocks = forecast_blocks(len(split.test), cfg.horizon)
    ws.update_manifest(forecast={"blocks": len(blocks), "last_block_rows": blocks[-1].stop - blocks[-1].start,
                                 "horizon": cfg.horizon, "covariates": cfg.covariates})
    return out


def _score_rows(cfg, split):
    keep = np.ones(len(split.test), bool)
    if cfg.scoring["night_policy"] == "exclude":
        keep = ~np.isin(split.test.hours, night_hours(split.train))
    return keep


def stage_combine(cfg: PipelineConfig, ws: Workspace):
    if not cfg.combiners:
        return {}
    split = _load_split(cfg, ws)
    y = split.test.ghi
    base = _load_forecasts(ws, cfg.combine_base)
    tr, ev = combiner_windows(len(y), cfg.combine_train_fraction)
    if len(tr) == 0 or len(ev) == 0:
        raise DataError("test window too short to split into combiner training and evaluation parts")
    day = ~np.isin(split.test.hours, night_hours(split.train))
    ts = split.test.timestamps
    out = {}
    for method in cfg.combiners:
        if method == "opera":
            fc, weights = aggregate.aggregate_quantiles(base, y, floor=0.0)
            fc = fc.slice(ev)
            aggregate.write_weights(cfg.combine_base, weights[min(weights, key=lambda t: abs(t - 0.5))],
                                    ws.path("combined", "opera_weights.csv"))
        else:
            opts = {"seed": roster.member_seed(cfg.seed, method)} if method == "qrnn" else None
            res = combine({n: base[n].point for n in cfg.combine_base}, y, method, cfg.levels, tr, ev,
                          fit_mask=day, timestamps=ts, floor=0.0, options=opts)
            # fitted on daylight rows only, so night rows are set to zero rather than extrapolated
            night_ev = ~day[ev]
            vals = np.where(night_ev[:, None], 0.0, res.forecast.values)
            fc = QuantileForecast.from_quantiles(cfg.levels, vals, res.forecast.timestamps, floor=0.0)
        fc.to_csv(ws.combined_csv(method), _fmt_ts(split.test))
        out[method] = fc
    ind = _load_forecasts(ws, cfg.models)
    keep = _score_rows(cfg, split)[ev]
    pool = {m: fc for m, fc in out.items()}
    pool.update({n: f.slice(ev) for n, f in ind.items()})
    pool = {n: f.slice(np.flatnonzero(keep)) for n, f in pool.items()}
    sc = cfg.scoring
    report = scoring.score_report(pool, y[ev][keep], sc["gamma_mode"], sc["shift"])
    report.to_csv(ws.combined_scores_csv)
    audit = [_audit_entry(m, ts[tr[0]], ts[tr[-1]], ts[ev[0]], ts[ev[-1]]) for m in cfg.combiners]
    if not all(a["train_precedes_eval"] for a in audit):
        raise ProtocolError("combiner training window does not precede its evaluation window")
    ws.update_manifest(audit_combiners=audit)
    return out


def stage_score(cfg: PipelineConfig, ws: Workspace):
    split = _load_split(cfg, ws)
    fcs = _load_forecasts(ws, cfg.models)
    keep = np.flatnonzero(_score_rows(cfg, split))
    sc = cfg.scoring
    report = scoring.score_report({n: f.slice(keep) for n, f in fcs.items()}, split.test.ghi[keep],
                                  sc["gamma_mode"], sc["shift"])
    report.to_csv(ws.scores_csv)
    ws.update_manifest(scoring={**sc, "rows_scored": int(len(keep))})
    return report


def _tau_series(fc: QuantileForecast, tau):
    return fc.level(tau) if float(tau) in fc.levels else fc.point


def stage_murphy(cfg: PipelineConfig, ws: Workspace):
    split = _load_split(cfg, ws)
    y = split.test.ghi
    tau = cfg.scoring["murphy_tau"]
    fcs = _load_forecasts(ws, cfg.models)
    series = {n: _tau_series(f, tau) for n, f in fcs.items()}
    curves = scoring.murphy(series, y, tau)
    scoring.write_murphy_csv(curves, ws.path("murphy", f"murphy_tau{tau:g}.csv"))
    svg.line_chart({n: (c.thetas, c.mean_scores) for n, c in curves.items()},
                   ws.path("murphy", f"murphy_tau{tau:g}.svg"), f"Murphy diagram (tau = {tau:g})",
                   "threshold theta", "mean elementary score")
    svg.density_chart({"observed": y, **{n: f.point for n, f in fcs.items()}},
                      ws.path("figures", "density.svg"), "Observed and forecast GHI densities")
    k = min(len(y), 168)
    x = np.arange(k)
    svg.line_chart({"observed": (x, y[:k]), **{n: (x, f.point[:k]) for n, f in fcs.items()}},
                   ws.path("figures", "forecasts.svg"), "First week of test forecasts", "hour", "GHI (W/m2)")
    return curves


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

VERDICT_METRICS = ("MAE", "RMSE", "CRPS")


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def best_models(rows, metric):
    """Names attaining the minimum of ``metric`` when compared to 12 significant digits."""
    vals = []
    for r in rows:
        try:
            v = float(r[metric])
        except (TypeError, ValueError):
            continue
        if math.isfinite(v):
            vals.append((r["Model"], v))
    if not vals:
        return [], float("nan")
    best = min(v for _, v in vals)
    key = f"{best:.12g}"
    return [n for n, v in vals if f"{v:.12g}" == key], best


def _table(rows):
    cols = scoring.SCORE_COLUMNS
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(r[c] for c in cols) + " |")
    return lines


def report(ws: Workspace) -> Path:
    """Write ``summary.md``; missing artifacts are listed rather than fatal."""
    man = ws.read_manifest()
    lines = ["# GHI forecast run summary", ""]
    data = man.get("data", {})
    if data:
        lines += [f"Data: {data.get('source')} ({data.get('rows_clean')} clean rows of {data.get('rows_raw')}).", ""]
    sel = man.get("selection")
    if sel:
        lines += [f"Selected covariates ({sel['method']}): {', '.join(sel['features'])}", ""]
    for title, path in (("Individual models, test window", ws.root / "scores.csv"),
                        ("Combined forecasts, combiner evaluation window", ws.root / "combined" / "scores.csv")):
        lines += [f"## {title}", ""]
        if not path.exists():
            lines += ["_missing_", ""]
            continue
        rows = _read_rows(path)
        lines += ["| Metric | Best | Value |", "|---|---|---|"]
        for metric in VERDICT_METRICS:
            names, _ = best_models(rows, metric)
            if not names:
                lines.append(f"| {metric} | none | |")
                continue
            value = next(r[metric] for r in rows if r["Model"] == names[0])
            label = names[0] if len(names) == 1 else "tie: " + ", ".join(names)
            lines.append(f"| {metric} | {label} | {value} |")
        lines += [""] + _table(rows) + [""]
    lines += ["## Artifacts", ""]
    expected = ["data/clean.csv", "selection/selection.csv", "scores.csv", "combined/scores.csv",
                "figures/density.svg", "figures/forecasts.svg", "manifest.json"]
    expected += sorted(str(p.relative_to(ws.root)) for p in ws.root.glob("forecasts/*.csv"))
    expected += sorted(str(p.relative_to(ws.root)) for p in ws.root.glob("combined/*.csv")
                       if p.name != "scores.csv")
    expected += sorted(str(p.relative_to(ws.root)) for p in ws.root.glob("murphy/*"))
    for rel in dict.fromkeys(expected):
        if (ws.root / rel).exists():
            lines.append(f"- [{rel}]({rel})")
        else:
            lines.append(f"- {rel} (missing)")
    out = ws.root / "summary.md"
    out.write_text("\n".join(lines) + "\n")
    return out


def stage_report(cfg: PipelineConfig, ws: Workspace):
    return report(ws)


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------

STAGE_FUNCS = {"ingest": stage_ingest, "select": stage_select, "fit": stage_fit, "forecast": stage_forecast,
               "combine": stage_combine, "score": stage_score, "murphy": stage_murphy, "report": stage_report}


def _versions():
    import numba
    import scipy
    try:
        from importlib.metadata import version
        pkg = version("artifact")
    except Exception:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "ghicast": pkg}


def run_stage(name: str, cfg: PipelineConfig, ws: Workspace | None = None):
    """Run one stage; on failure leave a FAILED marker naming the stage and cause."""
    ws = ws or Workspace(cfg.output)
    ws.root.mkdir(parents=True, exist_ok=True)
    t = time.perf_counter()
    try:
        result = STAGE_FUNCS[name](cfg, ws)
    except Exception as exc:
        ws.failed.write_text(f"stage: {name}\nerror: {type(exc).__name__}: {exc}\n")
        logger.error("stage %s failed: %s", name, exc)
        raise
    man = ws.read_manifest()
    stages = man.get("stages", {})
    stages[name] = {"status": "ok", "seconds": round(time.perf_counter() - t, 3)}
    ws.update_manifest(stages=stages, config=cfg.to_dict(), seed=cfg.seed, versions=_versions())
    return result


def run(cfg: PipelineConfig, stages: Sequence[str] = STAGES) -> Workspace:
    ws = Workspace(cfg.output)
    ws.root.mkdir(parents=True, exist_ok=True)
    if ws.failed.exists():
        ws.failed.unlink()
    for name in stages:
        logger.info("stage %s", name)
        run_stage(name, cfg, ws)
    return ws
