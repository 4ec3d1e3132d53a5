"""End-to-end pipeline, configuration, and CLI behavior on a small dataset."""

import csv
import json
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from agbmap import (
    ASSESSMENT_COLUMNS, ConfigError, EnsembleModel, Grid, PipelineConfig,
    PipelineError, render_report, run, synthesize, validate, write_grid,
)
from agbmap.cli import main
from agbmap.grid import read_grid

SEED = 11
CELLS = 48
PLOTS = 100


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def load_doc(config_path):
    with open(config_path) as f:
        return json.load(f)


def make_config(doc, base_dir, **overrides):
    doc = dict(doc)
    doc.update(overrides)
    return PipelineConfig.from_document(doc, base_dir=base_dir)


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """One small synthetic dataset with every stage run once."""
    root = tmp_path_factory.mktemp("small")
    cfg_path = Path(synthesize(root, seed=SEED, ncols=CELLS, nrows=CELLS,
                               n_plots=PLOTS))
    config = PipelineConfig.load(cfg_path)
    manifest = run(config)
    return SimpleNamespace(root=root, cfg_path=cfg_path, config=config,
                           manifest=manifest, doc=load_doc(cfg_path))


# -- synthetic dataset ----------------------------------------------------

def test_synth_is_deterministic(tmp_path):
    a = Path(synthesize(tmp_path / "a", seed=5, ncols=32, nrows=32, n_plots=40))
    b = Path(synthesize(tmp_path / "b", seed=5, ncols=32, nrows=32, n_plots=40))
    c = Path(synthesize(tmp_path / "c", seed=6, ncols=32, nrows=32, n_plots=40))
    for rel in ("inputs/plots.csv", "inputs/trees.csv",
                "inputs/landcover_2005.bin"):
        assert (a.parent / rel).read_bytes() == (b.parent / rel).read_bytes()
    assert (a.parent / "inputs/plots.csv").read_bytes() != \
        (c.parent / "inputs/plots.csv").read_bytes()


def test_synth_config_passes_validation(small):
    assert validate(small.config) == []


def test_synth_fraction_shares_sum_to_one(small):
    rows = read_rows(small.root / "inputs" / "carbon_fractions.csv")
    by_year = {}
    for r in rows:
        by_year.setdefault(r["year"], 0.0)
        by_year[r["year"]] += float(r["agb_share"])
    assert by_year
    for total in by_year.values():
        assert abs(total - 1.0) < 1e-9


def test_synth_landcover_covers_forest_and_removed_classes(small):
    lc = read_grid(small.root / "inputs" / "landcover_2005.bin")
    present = set(np.unique(lc.values[lc.mask]).astype(int).tolist())
    assert present <= set(range(1, 9))
    assert present & {3, 6, 7}, "no forest classes"
    assert present & set(int(c) for c in small.config.removed_landcover_classes)


# -- configuration loading and validation ---------------------------------

def test_config_missing_key_rejected(small):
    doc = dict(small.doc)
    del doc["plots"]
    with pytest.raises(ConfigError, match="missing"):
        PipelineConfig.from_document(doc, base_dir=small.root)


def test_config_unknown_key_rejected(small):
    with pytest.raises(ConfigError, match="unknown"):
        make_config(small.doc, small.root, typo_key=1)


def test_config_boolean_seed_rejected(small):
    with pytest.raises(ConfigError, match="seed"):
        make_config(small.doc, small.root, seed=True)


def test_config_hash_tracks_content(small):
    again = PipelineConfig.load(small.cfg_path)
    assert again.config_hash == small.config.config_hash
    other = make_config(small.doc, small.root, seed=SEED + 1)
    assert other.config_hash != small.config.config_hash


def test_validate_reports_missing_file(small):
    config = make_config(small.doc, small.root, plots="no/such/file.csv")
    findings = validate(config)
    assert any("missing file" in f and "plots" in f for f in findings)


def test_validate_reports_misaligned_raster(small, tmp_path):
    ref = read_grid(small.config.elevation)
    off = Grid(ncols=ref.ncols, nrows=ref.nrows, x_origin=ref.x_origin,
               y_origin=ref.y_origin, cellsize=ref.cellsize + 1.0,
               units=ref.units, values=np.asarray(ref.values).copy())
    bad_path = tmp_path / "off.bin"
    write_grid(off, bad_path)
    doc = json.loads(json.dumps(small.doc))
    doc["years"]["2005"]["predictors"]["brightness"] = str(bad_path)
    config = PipelineConfig.from_document(doc, base_dir=small.root)
    findings = validate(config)
    assert any("alignment" in f and "brightness" in f for f in findings)


def test_validate_reports_domain_problems(small):
    config = make_config(small.doc, small.root, holdout_panel=9,
                         train_frac=1.5)
    findings = validate(config)
    assert any("holdout_panel" in f for f in findings)
    assert any("train_frac" in f for f in findings)
    config = make_config(small.doc, small.root, scales_km=[])
    assert any("scales_km" in f for f in validate(config))


# -- run orchestration ----------------------------------------------------

def test_run_unknown_stage_rejected(small):
    with pytest.raises(ValueError, match="unknown stages"):
        run(small.config, {"extract", "bogus"})


def test_run_requires_upstream_artifacts(small, tmp_path):
    config = make_config(small.doc, small.root, output_dir=str(tmp_path / "o"))
    with pytest.raises(PipelineError, match="missing upstream artifact"):
        run(config, {"extract"})


def test_run_rejects_stale_upstream_hash(small, tmp_path):
    out = str(tmp_path / "o")
    run(make_config(small.doc, small.root, output_dir=out), {"ingest"})
    reseeded = make_config(small.doc, small.root, output_dir=out,
                           seed=SEED + 1)
    with pytest.raises(PipelineError, match="config hash mismatch"):
        run(reseeded, {"extract"})


def test_run_detects_deleted_upstream_file(small, tmp_path):
    out = tmp_path / "o"
    config = make_config(small.doc, small.root, output_dir=str(out))
    run(config, {"ingest"})
    (out / "ingest" / "model_dev.csv").unlink()
    with pytest.raises(PipelineError, match="absent on disk"):
        run(config, {"extract"})


def test_rerun_reproduces_identical_bytes(small):
    plots = small.root / "run" / "ingest" / "plots.csv"
    amap = small.root / "run" / "predict" / "agb_2005_CRM.bin"
    before = (plots.read_bytes(), amap.read_bytes())
    run(small.config, {"ingest", "predict"})
    assert (plots.read_bytes(), amap.read_bytes()) == before


def test_requested_stage_reuses_cached_upstream(small):
    amap = small.root / "run" / "predict" / "agb_2019_NSVB.bin"
    stamp = amap.stat().st_mtime_ns
    manifest = run(small.config, {"diff"})
    assert amap.stat().st_mtime_ns == stamp, "predict should not rerun"
    assert "diff" in manifest.stages
    assert (small.root / "run" / "diff" / "change_diff.bin").is_file()


# -- stage outputs --------------------------------------------------------

def test_ingest_outputs(small):
    rows = read_rows(small.root / "run" / "ingest" / "plots.csv")
    assert set(rows[0]) == {"plot_id", "x_m", "y_m", "inventory_year", "panel",
                            "forested_fraction", "max_canopy_height_m",
                            "agb_crm", "agb_nsvb", "role"}
    roles = {r["role"] for r in rows}
    assert roles == {"development", "assessment"}
    holdout = small.config.holdout_panel
    for r in rows:
        assert (r["role"] == "assessment") == (int(r["panel"]) == holdout)
    dev_rows = read_rows(small.root / "run" / "ingest" / "model_dev.csv")
    summary = json.load(open(small.root / "run" / "ingest" / "summary.json"))
    assert summary["n_model_dev"] == len(dev_rows)
    assert summary["n_model_dev"] <= summary["n_development"]
    assert summary["n_assessment"] == sum(r["role"] == "assessment" for r in rows)


def test_extract_outputs(small):
    rows = read_rows(small.root / "run" / "extract" / "features.csv")
    names = small.config.predictor_names()
    assert list(rows[0]) == ["plot_id", "inventory_year", "agb_crm",
                             "agb_nsvb"] + names
    dev_ids = {r["plot_id"] for r in
               read_rows(small.root / "run" / "ingest" / "model_dev.csv")}
    for r in rows:
        assert r["plot_id"] in dev_ids
        for name in names:
            assert np.isfinite(float(r[name]))


def test_fit_outputs(small):
    for allometry in ("CRM", "NSVB"):
        path = small.root / "run" / "fit" / f"model_{allometry}.json"
        model = EnsembleModel.from_json(path.read_text())
        assert model.ybar_train > 0
    rows = read_rows(small.root / "run" / "fit" / "test_metrics.csv")
    assert [r["allometry"] for r in rows] == ["CRM", "NSVB"]
    for r in rows:
        assert int(r["n"]) > 0
        assert float(r["rmse"]) > 0


def test_predict_outputs(small):
    lc = read_grid(small.config.years[2005].landcover)
    removed = np.isin(lc.values, list(small.config.removed_landcover_classes))
    for allometry in ("CRM", "NSVB"):
        agb = read_grid(small.root / "run" / "predict" / f"agb_2005_{allometry}.bin")
        assert agb.units == "Mg/ha"
        assert not np.any(agb.mask & removed), "removed classes must be masked"
        assert float(np.min(agb.values[agb.mask])) >= 0.0
        pr = read_grid(small.root / "run" / "predict" / f"pctrank_2005_{allometry}.bin")
        vals = pr.values[pr.mask]
        assert float(np.min(vals)) >= 0.0 and float(np.max(vals)) <= 100.0
        assert np.array_equal(pr.mask, agb.mask)


def test_assess_outputs(small):
    summary = json.load(open(small.root / "run" / "assess" / "summary.json"))
    for allometry in ("CRM", "NSVB"):
        rows = read_rows(small.root / "run" / "assess" / f"assessment_{allometry}.csv")
        assert list(rows[0]) == list(ASSESSMENT_COLUMNS)
        scales = [float(r["scale_km"]) for r in rows]
        assert scales[0] == 1.0
        assert scales == sorted(scales)
        assert int(rows[0]["n"]) >= 2
        pairs = read_rows(small.root / "run" / "assess" / f"pairs_{allometry}.csv")
        assert len(pairs) == summary[allometry]["n_pairs"]
        ks = summary[allometry]["ks_reference_vs_predicted"]
        assert 0.0 <= ks <= 1.0


def test_agree_outputs(small):
    for year in (2005, 2019):
        rows = read_rows(small.root / "run" / "agree" / f"agreement_{year}.csv")
        assert list(rows[0]) == ["scale_km", "n", "ac", "ac_systematic",
                                 "ac_unsystematic", "gmfr_intercept",
                                 "gmfr_slope"]
        assert float(rows[0]["scale_km"]) == 1.0
        for r in rows:
            if r["ac"] != "":
                assert float(r["ac"]) <= 1.0 + 1e-12


def test_diff_change_invariant(small):
    pred = small.root / "run" / "predict"
    grids = {f"{y}_{a}": read_grid(pred / f"agb_{y}_{a}.bin")
             for y in (2005, 2019) for a in ("CRM", "NSVB")}
    stored = read_grid(small.root / "run" / "diff" / "change_diff.bin")
    joint = np.ones_like(stored.mask)
    for g in grids.values():
        joint &= g.mask
    assert np.array_equal(stored.mask, joint)
    expect = ((grids["2019_NSVB"].values.astype(np.float64)
               - grids["2005_NSVB"].values)
              - (grids["2019_CRM"].values.astype(np.float64)
                 - grids["2005_CRM"].values))
    got = stored.values.astype(np.float64)
    assert np.max(np.abs(got[joint] - expect[joint])) < 1e-3


def test_stocks_outputs(small):
    rows = read_rows(small.root / "run" / "stocks" / "stocks.csv")
    assert {r["quantity"] for r in rows} == {"AGB", "AGC"}
    assert {r["method"] for r in rows} == {"design", "model"}
    model_bases = {r["area_basis"] for r in rows if r["method"] == "model"}
    assert model_bases == {"extent", "valid"}
    assert any(r["year"] == "2019-2005" for r in rows)
    # constant CRM carbon fraction halves the AGB total exactly
    by_key = {(r["quantity"], r["method"], r["allometry"], r["area_basis"],
               r["year"]): float(r["total_mt"]) for r in rows}
    for (q, m, a, basis, y), v in by_key.items():
        if q == "AGB" and a == "CRM":
            assert by_key[("AGC", m, a, basis, y)] == pytest.approx(0.5 * v,
                                                                    rel=1e-12)
    dm = read_rows(small.root / "run" / "stocks" / "design_minus_model.csv")
    for r in dm:
        diff = float(r["design_mt"]) - float(r["model_mt"])
        assert float(r["design_minus_model_mt"]) == pytest.approx(diff, abs=1e-9)
    meta = json.load(open(small.root / "run" / "stocks" / "stocks.json"))
    assert meta["model_basis_for_comparison"] == "extent"
    assert "post-stratification" in meta["note"]


def test_rescale_outputs(small):
    rows = read_rows(small.root / "run" / "rescale" / "rescale.csv")
    assert [int(r["year"]) for r in rows] == [2005, 2019]
    for r in rows:
        assert 0.8 < float(r["coef_source"]) < 1.4
        assert float(r["test_r2"]) > 0.8


# -- command line ---------------------------------------------------------

def test_cli_synth_then_ingest(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["synth", "--out", str(out), "--seed", "3",
                 "--cells", "32", "--plots", "40"]) == 0
    assert main(["ingest", "--config", str(out / "config.json")]) == 0
    stdout = capsys.readouterr().out
    assert "completed stages: ingest" in stdout
    assert "configuration hash" in stdout


def test_cli_validation_failure_is_exit_1(small, tmp_path, capsys):
    doc = dict(small.doc)
    doc["plots"] = "missing.csv"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["ingest", "--config", str(bad)]) == 1
    assert "invalid configuration" in capsys.readouterr().err


def test_cli_unknown_extra_stage_is_exit_1(small, capsys):
    assert main(["ingest", "--config", str(small.cfg_path),
                 "--stages", "bogus"]) == 1
    assert "unknown stage" in capsys.readouterr().err


def test_cli_missing_upstream_is_exit_2(small, tmp_path, capsys):
    assert main(["fit", "--config", str(small.cfg_path),
                 "--out", str(tmp_path / "fresh")]) == 2
    assert "missing upstream artifact" in capsys.readouterr().err


def test_cli_seed_override_changes_hash(small, tmp_path, capsys):
    assert main(["ingest", "--config", str(small.cfg_path),
                 "--seed", "99", "--out", str(tmp_path / "o")]) == 0
    stdout = capsys.readouterr().out
    line = [l for l in stdout.splitlines() if "configuration hash" in l][0]
    assert line.split()[-1] != small.config.config_hash


def test_cli_report(small, capsys):
    assert main(["report", "--config", str(small.cfg_path)]) == 0
    stdout = capsys.readouterr().out
    assert "stocks and stock changes" in stdout
    assert "map assessment, CRM" in stdout
    assert small.config.config_hash in stdout


def test_cli_report_cap_is_display_only(small, capsys):
    before = (small.root / "run" / "diff" / "change_diff.bin").read_bytes()
    assert main(["report", "--config", str(small.cfg_path),
                 "--cap", "5"]) == 0
    stdout = capsys.readouterr().out
    assert "display cap +/- 5" in stdout
    after = (small.root / "run" / "diff" / "change_diff.bin").read_bytes()
    assert after == before


def test_cli_report_without_run_is_exit_2(small, tmp_path, capsys):
    assert main(["report", "--config", str(small.cfg_path),
                 "--out", str(tmp_path / "empty")]) == 2
    assert "nothing to report" in capsys.readouterr().err


def test_report_text_matches_manifest(small):
    text = render_report(small.config)
    for stage in small.manifest.stages:
        assert stage in text
