"""Hourly radiometric data: ingestion, cleaning, splitting and design matrices."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, DataQualityError, FetchError, RowError, SchemaError

logger = logging.getLogger(__name__)

COVARIATES = ("Temp", "RH", "WS", "BP", "WD", "WD_Stv", "Rain_Tot", "WS_Max")
CALENDAR_FEATURES = ("hour_sin", "hour_cos")
TARGET = "GHI"
TIMESTAMP = "timestamp"
REQUIRED_COLUMNS = (TIMESTAMP, TARGET) + COVARIATES
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "-9999", "-7999"})

HOUR = np.timedelta64(3600, "s")


def _readonly(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TimeSeriesFrame:
    """Immutable hourly table of GHI and the eight station covariates.

    ``timestamps`` hold local station time as ``datetime64[s]``; the offset from
    UTC (minutes) is kept separately in ``utc_offset`` so diurnal structure is
    read directly off the clock.
    """

    timestamps: np.ndarray
    ghi: np.ndarray
    covariates: np.ndarray
    utc_offset: int | None = None
    provenance: str = ""

    def __post_init__(self):
        ts = _readonly(self.timestamps, "datetime64[s]").reshape(-1)
        ghi = _readonly(self.ghi, float).reshape(-1)
        cov = _readonly(self.covariates, float)
        if cov.size == 0:
            cov = _readonly(np.empty((len(ts), len(COVARIATES))))
        if cov.shape != (len(ts), len(COVARIATES)) or len(ghi) != len(ts):
            raise ValueError(
                f"inconsistent frame shapes: {len(ts)} timestamps, {len(ghi)} GHI, "
                f"covariates {cov.shape}"
            )
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "ghi", ghi)
        object.__setattr__(self, "covariates", cov)

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, idx) -> TimeSeriesFrame:
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return TimeSeriesFrame(
            self.timestamps[idx], self.ghi[idx], self.covariates[idx],
            self.utc_offset, self.provenance,
        )

    def column(self, name: str) -> np.ndarray:
        if name == TARGET:
            return self.ghi
        if name in COVARIATES:
            return self.covariates[:, COVARIATES.index(name)]
        if name in CALENDAR_FEATURES:
            angle = 2 * np.pi * self.hours / 24.0
            return _readonly(np.sin(angle) if name == "hour_sin" else np.cos(angle))
        raise KeyError(name)

    @property
    def hours(self) -> np.ndarray:
        """Local hour of day (0-23) of each row."""
        secs = self.timestamps.astype("int64")
        return (secs // 3600) % 24

    def equals(self, other: TimeSeriesFrame) -> bool:
        return (
            len(self) == len(other)
            and self.utc_offset == other.utc_offset
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.ghi, other.ghi, equal_nan=True)
            and np.array_equal(self.covariates, other.covariates, equal_nan=True)
        )

    def with_values(self, ghi=None, covariates=None) -> TimeSeriesFrame:
        return TimeSeriesFrame(
            self.timestamps,
            self.ghi if ghi is None else ghi,
            self.covariates if covariates is None else covariates,
            self.utc_offset,
            self.provenance,
        )

    @staticmethod
    def concat(frames: Sequence[TimeSeriesFrame]) -> TimeSeriesFrame:
        frames = list(frames)
        if not frames:
            raise ValueError("nothing to concatenate")
        return TimeSeriesFrame(
            np.concatenate([f.timestamps for f in frames]),
            np.concatenate([f.ghi for f in frames]),
            np.concatenate([f.covariates for f in frames]),
            frames[0].utc_offset,
            frames[0].provenance,
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: TimeSeriesFrame
    test: TimeSeriesFrame
    ratio: float


# --------------------------------------------------------------------------
# CSV input/output
# --------------------------------------------------------------------------

def _parse_timestamp(text: str, line: int):
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(s)
    except ValueError:
        raise RowError(line, f"unparseable timestamp {text!r}") from None
    offset = None
    if dt.tzinfo is not None:
        offset = int(dt.utcoffset().total_seconds() // 60)
    return dt, offset


def _parse_number(text: str, line: int, column: str) -> float:
    s = text.strip()
    if s.lower() in MISSING_TOKENS:
        return np.nan
    try:
        return float(s)
    except ValueError:
        raise RowError(line, f"non-numeric value {text!r} in column {column!r}") from None


def parse_csv(text: str, schema: Mapping[str, str] | None = None,
              source: str = "", utc_offset: int | None = None) -> TimeSeriesFrame:
    """Parse CSV text into a frame.

    ``schema`` maps canonical names (``timestamp``, ``GHI``, ``Temp``, ...) to
    the header names used in the file; unmapped names are looked up verbatim.
    Timestamps carrying an explicit offset are normalised to the offset of the
    first record; naive timestamps are taken as local time with ``utc_offset``.
    """
    schema = dict(schema or {})
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(TIMESTAMP, "empty file: header row required") from None
    header = [h.strip() for h in header]
    positions = {}
    for name in REQUIRED_COLUMNS:
        col = schema.get(name, name)
        if col not in header:
            raise SchemaError(name, f"missing required column {name!r} (looked for {col!r})")
        positions[name] = header.index(col)

    stamps, ghi, cov = [], [], []
    frame_offset = utc_offset
    for lineno, record in enumerate(reader, start=2):
        if not record or all(not c.strip() for c in record):
            continue
        if len(record) < len(header):
            raise RowError(lineno, f"expected {len(header)} fields, got {len(record)}")
        dt, off = _parse_timestamp(record[positions[TIMESTAMP]], lineno)
        if off is not None:
            if frame_offset is None:
                frame_offset = off
            dt = (dt - timedelta(minutes=off) + timedelta(minutes=frame_offset)).replace(tzinfo=None)
        stamps.append(np.datetime64(dt.replace(tzinfo=None), "s"))
        ghi.append(_parse_number(record[positions[TARGET]], lineno, TARGET))
        cov.append([_parse_number(record[positions[c]], lineno, c) for c in COVARIATES])

    return TimeSeriesFrame(
        np.array(stamps, dtype="datetime64[s]"),
        np.array(ghi, dtype=float),
        np.array(cov, dtype=float).reshape(len(stamps), len(COVARIATES)),
        frame_offset,
        source,
    )


def load_csv(path, schema: Mapping[str, str] | None = None,
             utc_offset: int | None = None) -> TimeSeriesFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return parse_csv(path.read_text(encoding="utf-8-sig"), schema, str(path), utc_offset)


def format_timestamp(ts: np.datetime64, utc_offset: int | None) -> str:
    dt = ts.astype("datetime64[s]").item()
    if utc_offset is not None:
        dt = dt.replace(tzinfo=timezone(timedelta(minutes=utc_offset)))
    return dt.isoformat()


def format_float(x: float) -> str:
    """Shortest representation that parses back to the same double."""
    x = float(x)
    if np.isnan(x):
        return ""
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def to_csv_text(frame: TimeSeriesFrame) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REQUIRED_COLUMNS)
    for i in range(len(frame)):
        w.writerow(
            [format_timestamp(frame.timestamps[i], frame.utc_offset), format_float(frame.ghi[i])]
            + [format_float(v) for v in frame.covariates[i]]
        )
    return buf.getvalue()


def write_csv(frame: TimeSeriesFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv_text(frame), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Remote retrieval
# --------------------------------------------------------------------------

def fetch_remote(url: str, window: tuple[str, str] | None = None, *,
                 schema: Mapping[str, str] | None = None, utc_offset: int | None = None,
                 retries: int = 3, backoff: float = 0.5, timeout: float = 30.0,
                 session=None) -> TimeSeriesFrame:
    """GET an hourly CSV export and parse it exactly like :func:`load_csv`.

    ``window`` is a ``(start, end)`` pair of ISO dates sent as the ``start``
    and ``end`` query parameters. Transport failures are retried ``retries``
    times with exponential backoff before a retryable :class:`FetchError` is
    raised; a non-success HTTP status fails immediately.
    """
    import requests

    params = None
    if window is not None:
        start, end = window
        if not start or not end or str(start) > str(end):
            raise ValueError(f"empty or inverted window {window!r}")
        params = {"start": str(start), "end": str(end)}
    http = session or requests
    last = None
    for attempt in range(retries + 1):
        try:
            resp = http.get(url, params=params, timeout=timeout)
        except requests.RequestException as exc:
            last = exc
            logger.warning("fetch attempt %d/%d failed: %s", attempt + 1, retries + 1, exc)
            if attempt < retries:
                time.sleep(backoff * 2**attempt)
            continue
        if not 200 <= resp.status_code < 300:
            raise FetchError(f"GET {url} returned HTTP {resp.status_code}",
                             status=resp.status_code, retryable=False)
        resp.encoding = resp.encoding or "utf-8"
        text = resp.text
        if text.startswith("﻿"):
            text = text[1:]
        return parse_csv(text, schema, url, utc_offset)
    raise FetchError(f"GET {url} failed after {retries + 1} attempts: {last}", retryable=True)


# --------------------------------------------------------------------------
# Cleaning
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GapPolicy:
    max_interp_hours: int = 2
    max_drop_fraction: float = 0.5


@dataclass
class CleanReport:
    interpolated: int = 0
    dropped: int = 0
    clamped_ghi: int = 0
    duplicates: int = 0
    notes: list = field(default_factory=list)


def _nan_runs(mask: np.ndarray):
    """Yield (start, stop) of consecutive True stretches."""
    if not mask.any():
        return
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    for s, e in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
        yield int(s), int(e)


def clean(frame: TimeSeriesFrame, policy: GapPolicy = GapPolicy(),
          report: CleanReport | None = None) -> TimeSeriesFrame:
    """Regularise a raw frame onto the hourly grid and repair it.

    Per column, gaps of at most ``policy.max_interp_hours`` consecutive hours
    that are bracketed by observations are filled by linear interpolation in
    time; rows still incomplete afterwards (longer gaps, ragged edges) are
    dropped, which leaves a timestamp jump in the output. Negative GHI is
    clamped to zero, RH is clipped to [0, 100] and WD wrapped into [0, 360).
    """
    if len(frame) == 0:
        raise ValueError("cannot clean an empty frame")
    report = report if report is not None else CleanReport()

    order = np.argsort(frame.timestamps, kind="stable")
    ts = frame.timestamps[order]
    values = np.column_stack([frame.ghi[order], frame.covariates[order]])
    keep = np.concatenate([[True], ts[1:] != ts[:-1]])
    report.duplicates = int((~keep).sum())
    if report.duplicates:
        logger.warning("dropped %d duplicate timestamps", report.duplicates)
    ts, values = ts[keep], values[keep]

    offsets = (ts - ts[0]) / HOUR
    if not np.allclose(offsets, np.round(offsets)):
        raise DataError("timestamps are not aligned to an hourly grid")
    slots = np.round(offsets).astype(np.int64)
    n_grid = int(slots[-1]) + 1
    grid = np.full((n_grid, values.shape[1]), np.nan)
    grid[slots] = values

    for j in range(grid.shape[1]):
        col = grid[:, j]
        for s, e in _nan_runs(np.isnan(col)):
            if s == 0 or e == n_grid or e - s > policy.max_interp_hours:
                continue
            lo, hi = col[s - 1], col[e]
            frac = (np.arange(s, e) - (s - 1)) / (e - (s - 1))
            col[s:e] = lo + frac * (hi - lo)
            report.interpolated += e - s

    complete = ~np.isnan(grid).any(axis=1)
    present = np.zeros(n_grid, dtype=bool)
    present[slots] = True
    report.dropped = int((present & ~complete).sum())
    n_in = len(frame)
    if report.dropped or (~present & ~complete).any():
        logger.info("dropped %d incomplete rows (of %d input rows)", report.dropped, n_in)
    if not complete.any() or report.dropped / n_in > policy.max_drop_fraction:
        raise DataQualityError(
            f"cleaning would drop {report.dropped} of {n_in} rows "
            f"(limit {policy.max_drop_fraction:.0%})"
        )

    out = grid[complete]
    out_ts = ts[0] + np.flatnonzero(complete).astype("int64") * HOUR

    neg = out[:, 0] < 0
    report.clamped_ghi = int(neg.sum())
    if report.clamped_ghi:
        logger.info("clamped %d negative GHI values to 0", report.clamped_ghi)
        out[neg, 0] = 0.0
    rh = 1 + COVARIATES.index("RH")
    out[:, rh] = np.clip(out[:, rh], 0.0, 100.0)
    wd = 1 + COVARIATES.index("WD")
    out[:, wd] = np.mod(out[:, wd], 360.0)

    return TimeSeriesFrame(out_ts, out[:, 0], out[:, 1:], frame.utc_offset, frame.provenance)


def validate(frame: TimeSeriesFrame) -> list[str]:
    """Return a list of invariant violations (empty when the frame is clean)."""
    problems = []
    if len(frame) > 1:
        steps = np.diff(frame.timestamps) / HOUR
        if (steps <= 0).any():
            problems.append("timestamps not strictly increasing")
        elif not np.allclose(steps, np.round(steps)):
            problems.append("timestamps off the hourly grid")
    if np.isnan(frame.ghi).any() or np.isnan(frame.covariates).any():
        problems.append("missing values present")
    if (frame.ghi < 0).any():
        problems.append("negative GHI")
    rh = frame.column("RH")
    if ((rh < 0) | (rh > 100)).any():
        problems.append("RH outside [0, 100]")
    wd = frame.column("WD")
    if ((wd < 0) | (wd >= 360)).any():
        problems.append("WD outside [0, 360)")
    return problems


def segments(frame: TimeSeriesFrame) -> list[slice]:
    """Contiguous hourly stretches of a cleaned frame."""
    if len(frame) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frame.timestamps) != HOUR) + 1
    bounds = np.concatenate([[0], breaks, [len(frame)]])
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


# --------------------------------------------------------------------------
# Splitting and design matrices
# --------------------------------------------------------------------------

def split(frame: TimeSeriesFrame, ratio: float = 0.8) -> DatasetSplit:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    n_train = int(np.floor(ratio * len(frame) + 0.5))
    return DatasetSplit(frame[:n_train], frame[n_train:], ratio)


@dataclass(frozen=True)
class Scaler:
    features: tuple[str, ...]
    means: np.ndarray
    scales: np.ndarray

    def transform(self, frame: TimeSeriesFrame) -> np.ndarray:
        X = raw_matrix(frame, self.features)
        return (X - self.means) / self.scales

    def inverse_transform(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) * self.scales + self.means

    def to_dict(self):
        return {"features": list(self.features), "means": self.means.tolist(),
                "scales": self.scales.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["features"]), np.asarray(d["means"], float),
                   np.asarray(d["scales"], float))


def available_features() -> tuple[str, ...]:
    return COVARIATES + CALENDAR_FEATURES


def raw_matrix(frame: TimeSeriesFrame, features: Sequence[str]) -> np.ndarray:
    unknown = [f for f in features if f not in available_features()]
    if unknown:
        raise ValueError(f"unknown feature(s): {', '.join(unknown)}")
    if not features:
        return np.empty((len(frame), 0))
    return np.column_stack([frame.column(f) for f in features]).astype(float)


def design_matrix(frame: TimeSeriesFrame, features: Sequence[str], standardize: bool = True):
    """Build ``(X, y, scaler)`` for the requested features.

    With ``standardize`` every column is centred and divided by its sample
    standard deviation; constant columns are passed through untouched.
    """
    features = tuple(features)
    X = raw_matrix(frame, features)
    d = X.shape[1]
    means, scales = np.zeros(d), np.ones(d)
    if standardize and len(frame) > 1:
        mu = X.mean(axis=0)
        sd = X.std(axis=0, ddof=1)
        for j in range(d):
            if sd[j] > 0 and np.isfinite(sd[j]):
                means[j], scales[j] = mu[j], sd[j]
            else:
                logger.warning("feature %s is constant; left unscaled", features[j])
    scaler = Scaler(features, means, scales)
    return (X - means) / scales, frame.ghi.copy(), scaler


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

def synthetic_frame(days: int = 30, seed: int = 0, start: str = "2020-07-01T00:00:00",
                    utc_offset: int = 120) -> TimeSeriesFrame:
    """Deterministic station-like series with a diurnal cycle and cloudy spells.

    The GHI is a clear-sky bell between roughly 06:30 and 17:30 attenuated by a
    persistent cloud index; temperature, humidity and wind respond to the same
    cloud and radiation history so that the covariates carry real signal.
    """
    rng = np.random.default_rng(seed)
    n = 24 * days
    t0 = np.datetime64(start, "s")
    ts = t0 + np.arange(n).astype("int64") * HOUR
    hour = (np.arange(n) + (t0.astype("int64") // 3600)) % 24
    day = np.arange(n) // 24

    solar = np.clip(np.sin(np.pi * (hour + 0.5 - 6.5) / 11.0), 0.0, None)
    clear_sky = 900.0 * solar**1.3

    daily_cloud = np.empty(days)
    c = 0.3
    for k in range(days):
        c = np.clip(0.6 * c + 0.4 * rng.beta(0.8, 1.6), 0.0, 1.0)
        daily_cloud[k] = c
    cloud = np.clip(daily_cloud[day] + 0.15 * rng.standard_normal(n), 0.0, 1.0)
    ghi = np.round(clear_sky * (1.0 - 0.75 * cloud), 2)

    heat = np.convolve(ghi, np.exp(-np.arange(8) / 3.0) / 3.0, mode="full")[:n]
    base_temp = 9.0 + 3.0 * np.sin(2 * np.pi * day / 17.0)
    temp = np.round(base_temp + 0.022 * heat + 0.8 * rng.standard_normal(n), 2)
    rh = np.round(np.clip(75.0 - 2.4 * (temp - base_temp) + 18.0 * cloud
                          + 4.0 * rng.standard_normal(n), 4.0, 100.0), 2)
    ws = np.round(np.abs(1.2 + 0.004 * ghi + 0.8 * rng.gamma(2.0, 0.6, n) - 1.0), 3)
    ws_max = np.round(ws * (1.4 + 0.3 * rng.random(n)) + 0.2, 3)
    bp = np.round(862.0 + 2.5 * np.sin(2 * np.pi * np.arange(n) / (24 * 6.5))
                  - 0.6 * np.cos(2 * np.pi * hour / 12.0) + 0.3 * rng.standard_normal(n), 2)
    wd = np.round(np.mod(40.0 + 60.0 * np.sin(2 * np.pi * np.arange(n) / 61.0)
                         + 25.0 * rng.standard_normal(n), 360.0), 1)
    wd_stv = np.round(np.clip(25.0 - 8.0 * ws + 6.0 * rng.standard_normal(n), 2.0, None), 2)
    rain = np.round(np.where(cloud > 0.6, rng.exponential(0.6, n) * (rng.random(n) < 0.35), 0.0), 2)

    cov = np.column_stack([temp, rh, ws, bp, wd, wd_stv, rain, ws_max])
    return TimeSeriesFrame(ts, ghi, cov, utc_offset, f"synthetic(days={days}, seed={seed})")


def bundled_synthetic_path() -> Path:
    return Path(__file__).parent / "data" / "synthetic_30d.csv"
