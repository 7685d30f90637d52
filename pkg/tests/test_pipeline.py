import json
import logging

import numpy as np
import pytest

from ghicast import cli, pipeline, roster
from ghicast import dataset as ds
from ghicast.errors import ConfigError, FitError
from ghicast.quantile import QuantileForecast

FAST_OPTIONS = {
    "gpr": {"restarts": 1, "max_iter": 5},
    "dgp": {"iters": 30, "burn_in": 10, "thin": 5, "max_n": 60},
    "bsts_long": {"iters": 30, "burn_in": 10, "max_draws": 10},
    "gbr": {"n_trees": 20},
    "aqr": {"q": 5, "penalty": 0.01},
}
LEVELS = (0.1, 0.5, 0.9)


def fast_config(out, **kw):
    doc = {"models": list(FAST_OPTIONS), "model_options": FAST_OPTIONS, "levels": list(LEVELS),
           "selection": {"compare": ["lasso", "gbr"], "method": "gbr"},
           "combiners": ["qra", "opera"], "output": str(out), "seed": 5}
    doc.update(kw)
    return pipeline.PipelineConfig.from_dict(doc)


# --------------------------------------------------------------------------
# Blocks and leakage
# --------------------------------------------------------------------------

def test_block_arithmetic():
    assert len(pipeline.forecast_blocks(96, 48)) == 2
    blocks = pipeline.forecast_blocks(1759, 48)
    assert len(blocks) == 37
    assert blocks[-1].stop - blocks[-1].start == 31
    assert blocks[-1].stop == 1759


def test_short_test_window_gives_one_truncated_block(caplog):
    with caplog.at_level(logging.WARNING):
        blocks = pipeline.forecast_blocks(30, 48)
    assert blocks == [slice(0, 30)]
    assert "shorter than the horizon" in caplog.text


@pytest.fixture(scope="module")
def small_split():
    return ds.split(ds.synthetic_frame(days=8, seed=2), 0.75)


@pytest.fixture(scope="module")
def members(small_split):
    feats = ("Temp", "RH")
    return {n: roster.fit_member(n, small_split.train, feats, o, 1, LEVELS) for n, o in FAST_OPTIONS.items()}


@pytest.mark.parametrize("covariates", ["realized", "persistence"])
def test_block_forecasts_ignore_later_rows(members, small_split, covariates):
    train, test = small_split.train, small_split.test
    rng = np.random.default_rng(0)
    base = {n: pipeline.rolling_forecast(m, train, test, 12, LEVELS, covariates) for n, m in members.items()}
    for cut in (12, 24):
        perm = np.concatenate([np.arange(cut), cut + rng.permutation(len(test) - cut)])
        shuffled = test.with_values(ghi=test.ghi[perm], covariates=test.covariates[perm])
        for n, m in members.items():
            alt = pipeline.rolling_forecast(m, train, shuffled, 12, LEVELS, covariates)
            np.testing.assert_array_equal(alt.values[:cut], base[n].values[:cut], err_msg=n)


def test_persistence_inputs_copy_previous_day(small_split):
    train, test = small_split.train, small_split.test
    inp = pipeline.persistence_inputs(train, test, 48)
    full = ds.TimeSeriesFrame.concat([train, test])
    n0 = len(train)
    for blk in pipeline.forecast_blocks(len(test), 48):
        for j in range(blk.stop - blk.start):
            src = n0 + blk.start - 24 + j % 24
            assert src < n0 + blk.start
            np.testing.assert_array_equal(inp.covariates[blk.start + j], full.covariates[src])
            assert full.hours[src] == test.hours[blk.start + j]


def test_member_roundtrip_preserves_forecasts(members, small_split, tmp_path):
    for n, m in members.items():
        roster.save_member(m, tmp_path / n)
        back = roster.load_member(tmp_path / n)
        a = pipeline.rolling_forecast(m, small_split.train, small_split.test, 48, LEVELS)
        b = pipeline.rolling_forecast(back, small_split.train, small_split.test, 48, LEVELS)
        np.testing.assert_array_equal(a.values, b.values, err_msg=n)
        assert back.train_end == m.train_end


def test_bsts_short_window_uses_recent_training_rows(small_split):
    m = roster.fit_member("bsts_short", small_split.train, ("Temp",), {"iters": 20, "burn_in": 5, "window_hours": 48},
                          0, LEVELS)
    assert m.n_train == 48
    assert m.train_end == str(small_split.train.timestamps[-1])
    assert m.train_start == str(small_split.train.timestamps[-48])


def test_night_hours_from_training_climatology(small_split):
    nh = pipeline.night_hours(small_split.train)
    assert 0 in nh and 12 not in nh


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def test_config_defaults_and_roundtrip():
    cfg = pipeline.PipelineConfig()
    cfg.validate()
    assert cfg.horizon == 48
    assert cfg.models == ("gpr", "dgp", "bsts_long", "bsts_short", "gbr", "aqr")
    doc = cfg.to_dict()
    assert doc["model_options"]["bsts_short"]["window_hours"] == 720
    assert doc["model_options"]["bsts_long"]["iters"] == 2000
    again = pipeline.PipelineConfig.from_dict(json.loads(json.dumps(doc)))
    assert again.to_dict() == doc


@pytest.mark.parametrize("doc", [
    {"horizon": 0},
    {"models": []},
    {"bogus": 1},
    {"scoring": {"gamma_mode": "weird"}},
    {"models": ["gpr"], "combiners": ["qra"], "combine_base": ["bsts_long"]},
    {"model_options": {"gpr": {"nonsense": 3}}},
    {"models": ["mystery"]},
    {"levels": [0.5, 0.1]},
    {"covariates": "forecast"},
    {"selection": {"candidates": ["Temp", "Cloud"]}},
])
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        pipeline.PipelineConfig.from_dict(doc)


def test_custom_member_name_with_kind():
    cfg = pipeline.PipelineConfig.from_dict({"models": ["bsts_week"], "combiners": [],
                                             "model_options": {"bsts_week": {"kind": "bsts", "window_hours": 168}}})
    assert cfg.to_dict()["model_options"]["bsts_week"]["window_hours"] == 168


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------

def write_scores(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["Model,MAE,RMSE,CRPS,LogS,DSS,PL,zero_density"]
    lines += [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_report_names_best_and_reports_ties(tmp_path):
    write_scores(tmp_path / "scores.csv", [
        ["a", "10.0000000000001", "5.0", "3.0", "inf", "1.0", "2.0", "3"],
        ["b", "10.0000000000002", "4.0", "3.5", "1.0", "1.0", "2.0", "0"],
        ["c", "11.0", "6.0", "2.5", "2.0", "1.0", "2.0", "0"],
    ])
    text = pipeline.report(pipeline.Workspace(tmp_path)).read_text()
    assert "| MAE | tie: a, b | 10.0000000000001 |" in text
    assert "| RMSE | b | 4.0 |" in text
    assert "| CRPS | c | 2.5 |" in text
    assert "combined/scores.csv (missing)" in text
    assert "_missing_" in text


def test_best_models_skips_non_finite():
    rows = [{"Model": "a", "LogS": "inf"}, {"Model": "b", "LogS": "3.5"}, {"Model": "c", "LogS": ""}]
    assert pipeline.best_models(rows, "LogS") == (["b"], 3.5)
    assert pipeline.best_models([{"Model": "a", "LogS": "inf"}], "LogS")[0] == []


# --------------------------------------------------------------------------
# End to end (reduced settings)
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fast_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = fast_config(out)
    pipeline.run(cfg)
    return cfg, out


def test_bundle_contents(fast_run):
    cfg, out = fast_run
    for rel in ("data/clean.csv", "selection/selection.csv", "scores.csv", "combined/scores.csv",
                "combined/qra.csv", "combined/opera.csv", "figures/density.svg", "murphy/murphy_tau0.5.csv",
                "murphy/murphy_tau0.5.svg", "manifest.json", "summary.md"):
        assert (out / rel).exists(), rel
    assert not (out / "FAILED").exists()
    scores = (out / "scores.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in scores[1:]] == list(cfg.models)
    man = json.loads((out / "manifest.json").read_text())
    assert all(a["train_precedes_eval"] for a in man["audit_models"] + man["audit_combiners"])
    assert set(man["stages"]) == set(pipeline.STAGES)
    assert man["seed"] == 5 and "numpy" in man["versions"]


def test_summary_values_match_score_file(fast_run):
    _, out = fast_run
    text = (out / "summary.md").read_text()
    rows = pipeline._read_rows(out / "scores.csv")
    for r in rows:
        assert f"| {r['Model']} | {r['MAE']} | {r['RMSE']} |" in text
    best, _ = pipeline.best_models(rows, "MAE")
    assert f"| MAE | {best[0]} |" in text


def test_forecast_files_cover_test_window(fast_run):
    cfg, out = fast_run
    frame = ds.load_csv(out / "data" / "clean.csv")
    test = ds.split(frame, cfg.split_ratio).test
    for n in cfg.models:
        fc = QuantileForecast.from_csv(out / "forecasts" / f"{n}.csv")
        assert len(fc) == len(test)
        assert np.all(np.diff(fc.values, axis=1) >= 0) and np.all(fc.values >= 0)
        np.testing.assert_array_equal(fc.timestamps, test.timestamps)


def test_replay_from_manifest_reproduces_csvs(fast_run, tmp_path):
    cfg, out = fast_run
    doc = json.loads((out / "manifest.json").read_text())["config"]
    doc["output"] = str(tmp_path / "replay")
    pipeline.run(pipeline.PipelineConfig.from_dict(doc))
    for f in sorted(out.rglob("*.csv")):
        rel = f.relative_to(out)
        assert (tmp_path / "replay" / rel).read_bytes() == f.read_bytes(), rel


def test_stage_failure_leaves_marker(tmp_path, monkeypatch):
    cfg = fast_config(tmp_path)
    pipeline.run(cfg, ("ingest", "select"))

    def boom(*a, **k):
        raise FitError("singular system")

    monkeypatch.setattr(roster, "fit_member", boom)
    with pytest.raises(FitError):
        pipeline.run(cfg, ("fit",))
    marker = (tmp_path / "FAILED").read_text()
    assert "stage: fit" in marker and "singular system" in marker
    assert (tmp_path / "data" / "clean.csv").exists()


# --------------------------------------------------------------------------
# Command line
# --------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["--config", str(bad), "run"]) == 2
    assert cli.main(["ingest", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")]) == 3
    assert "FAILED" in {p.name for p in (tmp_path / "o").iterdir()}
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps({"horizon": -1}))
    assert cli.main(["--config", str(cfgp), "fit"]) == 2

    def boom(*a, **k):
        raise FitError("diverged")

    monkeypatch.setattr(roster, "fit_member", boom)
    cfgp.write_text(json.dumps(fast_config(tmp_path / "o2").to_dict()))
    assert cli.main(["--config", str(cfgp), "run"]) == 4
    assert "stage: fit" in (tmp_path / "o2" / "FAILED").read_text()


def test_cli_stage_by_stage_matches_run(fast_run, tmp_path):
    cfg, out = fast_run
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(cfg.to_dict()))
    for stage in pipeline.STAGES:
        assert cli.main(["--config", str(cfgp), "--out", str(tmp_path / "s"), stage]) == 0
    for f in sorted(out.rglob("*.csv")):
        rel = f.relative_to(out)
        assert (tmp_path / "s" / rel).read_bytes() == f.read_bytes(), rel


def test_cli_seed_and_overrides(tmp_path):
    args = cli.build_parser().parse_args(["--seed", "9", "score", "--gamma-mode", "unshifted", "--out", "x"])
    cfg = cli.load_config(args)
    assert cfg.seed == 9 and cfg.output == "x" and cfg.scoring["gamma_mode"] == "unshifted"
    args = cli.build_parser().parse_args(["murphy", "--tau", "0.9"])
    assert cli.load_config(args).scoring["murphy_tau"] == 0.9
