"""Stage orchestration: configuration, validation, caching, and the stage
functions tying ingestion, extraction, modeling, mapping, assessment, and
accounting together.

Every stage is a pure function of (configuration, input files), seeded from
the configured seed, so reruns produce byte-identical data outputs. The run
manifest records what was built from which configuration hash; timings in the
manifest are the one thing excluded from the byte-identity guarantee.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import carbon as carbon_mod
from .footprint import PlotFootprint, pixel_overlap_weights, weighted_mean
from .grid import Grid, difference, mask_landcover, percent_rank, read_grid, summarize, write_grid
from .hexgrid import aggregate_pairs, make_hexgrid
from .inventory import (
    PlotRecord, aggregate_plot_agb, attach_densities, filter_model_dev,
    load_plots, load_trees, select_single_inventory, split_by_panel,
)
from .learners import (
    DEFAULT_GRIDS, EnsembleModel, LearnerSpec, cv_predict, fit_stack,
    grid_search, predict_grid, train_base,
)
from .metrics import (
    PairedSample, ac_decompose, basic_metrics, gmfr_fit, ks_statistic,
    multiscale_assessment, willmott_dr,
)

LOGGER = logging.getLogger(__name__)

ARTIFACT_VERSION = 1

STAGE_ORDER = ("ingest", "extract", "fit", "predict", "assess", "agree",
               "diff", "stocks", "rescale")
DEPENDENCIES = {
    "ingest": (),
    "extract": ("ingest",),
    "fit": ("extract",),
    "predict": ("fit",),
    "assess": ("ingest", "predict"),
    "agree": ("predict",),
    "diff": ("predict",),
    "stocks": ("ingest", "predict"),
    "rescale": ("predict",),
}

ALLOMETRIES = ("CRM", "NSVB")

ASSESSMENT_COLUMNS = ("scale_km", "n", "pph", "mae", "pct_mae", "rmse",
                      "pct_rmse", "me", "r2", "dr")


class ConfigError(ValueError):
    """Structurally invalid configuration document."""


class PipelineError(RuntimeError):
    """Stage execution failure (missing artifacts, stale cache, bad data)."""


# -- configuration --------------------------------------------------------

_REQUIRED_KEYS = {"seed", "output_dir", "holdout_panel", "scales_km",
                  "removed_landcover_classes", "trees", "plots",
                  "carbon_fractions", "elevation", "years"}
_OPTIONAL_KEYS = {"learner_grids", "region_area_ha", "cv_folds",
                  "train_frac", "rescale_sample"}


@dataclass
class YearInputs:
    predictors: dict[str, Path]
    landcover: Path


@dataclass
class PipelineConfig:
    seed: int
    output_dir: Path
    holdout_panel: object          # 1..5 or "random"
    scales_km: list[float]
    removed_landcover_classes: list[float]
    trees: Path
    plots: Path
    carbon_fractions: Path
    elevation: Path
    years: dict[int, YearInputs]
    learner_grids: dict[str, list[dict]] | None = None
    region_area_ha: float | None = None
    cv_folds: int = 5
    train_frac: float = 0.8
    rescale_sample: int = 1_000_000
    config_hash: str = ""

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read configuration {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"configuration {path} is not valid JSON: {e}") from e
        return cls.from_document(raw, base_dir=path.parent)

    @classmethod
    def from_document(cls, raw, base_dir) -> "PipelineConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        missing = sorted(_REQUIRED_KEYS - set(raw))
        if missing:
            raise ConfigError(f"configuration is missing keys: {missing}")
        unknown = sorted(set(raw) - _REQUIRED_KEYS - _OPTIONAL_KEYS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        if not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("seed must be an integer")
        if not isinstance(raw["years"], dict) or not raw["years"]:
            raise ConfigError("years must be a non-empty object")

        base = Path(base_dir)

        def path_of(v, label):
            if not isinstance(v, str) or not v:
                raise ConfigError(f"{label} must be a path string")
            p = Path(v)
            return p if p.is_absolute() else base / p

        years: dict[int, YearInputs] = {}
        for year_key, entry in raw["years"].items():
            try:
                year = int(year_key)
            except (TypeError, ValueError):
                raise ConfigError(f"year key {year_key!r} is not an integer") from None
            if not isinstance(entry, dict) or set(entry) != {"predictors", "landcover"}:
                raise ConfigError(
                    f"year {year} must define exactly 'predictors' and 'landcover'")
            preds = entry["predictors"]
            if not isinstance(preds, dict) or not preds:
                raise ConfigError(f"year {year} needs at least one predictor layer")
            years[year] = YearInputs(
                predictors={name: path_of(p, f"predictor {name!r}")
                            for name, p in preds.items()},
                landcover=path_of(entry["landcover"], f"landcover for {year}"),
            )

        grids = raw.get("learner_grids")
        if grids is not None and (not isinstance(grids, dict) or not grids):
            raise ConfigError("learner_grids must be a non-empty object when given")

        canonical = json.dumps(raw, sort_keys=True, separators=(",", ":"))
        cfg = cls(
            seed=raw["seed"],
            output_dir=path_of(raw["output_dir"], "output_dir"),
            holdout_panel=raw["holdout_panel"],
            scales_km=list(raw["scales_km"]),
            removed_landcover_classes=list(raw["removed_landcover_classes"]),
            trees=path_of(raw["trees"], "trees"),
            plots=path_of(raw["plots"], "plots"),
            carbon_fractions=path_of(raw["carbon_fractions"], "carbon_fractions"),
            elevation=path_of(raw["elevation"], "elevation"),
            years=dict(sorted(years.items())),
            learner_grids=grids,
            region_area_ha=raw.get("region_area_ha"),
            cv_folds=raw.get("cv_folds", 5),
            train_frac=raw.get("train_frac", 0.8),
            rescale_sample=raw.get("rescale_sample", 1_000_000),
            config_hash=hashlib.sha256(canonical.encode()).hexdigest(),
        )
        return cfg

    def predictor_names(self) -> list[str]:
        first = next(iter(self.years.values()))
        return sorted(first.predictors)

    def spec_grids(self) -> dict[str, list[LearnerSpec]]:
        raw = self.learner_grids if self.learner_grids is not None else DEFAULT_GRIDS
        out = {}
        for kind, grid in raw.items():
            out[kind] = [LearnerSpec.make(kind, **hp) for hp in grid]
            if not out[kind]:
                raise ConfigError(f"empty hyperparameter grid for {kind!r}")
        return out


def validate(config: PipelineConfig) -> list[str]:
    """Check paths, domains, and raster alignment. Empty list means valid."""
    findings: list[str] = []

    for label, p in [("trees", config.trees), ("plots", config.plots),
                     ("carbon_fractions", config.carbon_fractions),
                     ("elevation", config.elevation)]:
        if not Path(p).is_file():
            findings.append(f"missing file: {label} at {p}")
    for year, inputs in config.years.items():
        if not Path(inputs.landcover).is_file():
            findings.append(f"missing file: landcover for {year} at {inputs.landcover}")
        for name, p in sorted(inputs.predictors.items()):
            if not Path(p).is_file():
                findings.append(f"missing file: predictor {name!r} for {year} at {p}")

    if config.holdout_panel != "random":
        if not isinstance(config.holdout_panel, int) or not 1 <= config.holdout_panel <= 5:
            findings.append(f"holdout_panel must be 1..5 or 'random', "
                            f"got {config.holdout_panel!r}")
    if not config.scales_km:
        findings.append("scales_km is empty")
    elif any(not isinstance(s, (int, float)) or s <= 0 for s in config.scales_km):
        findings.append("scales_km entries must be positive numbers")
    if any(not isinstance(c, (int, float)) for c in config.removed_landcover_classes):
        findings.append("removed_landcover_classes entries must be numeric")
    if not 0.0 < config.train_frac < 1.0:
        findings.append("train_frac must be in (0, 1)")
    if not isinstance(config.cv_folds, int) or config.cv_folds < 2:
        findings.append("cv_folds must be an integer >= 2")
    if config.region_area_ha is not None and not config.region_area_ha > 0:
        findings.append("region_area_ha must be positive when given")

    try:
        grids = config.spec_grids()
        if not grids:
            findings.append("no learner kinds configured")
    except (ConfigError, ValueError) as e:
        findings.append(f"learner grid: {e}")

    name_sets = {year: set(inputs.predictors) for year, inputs in config.years.items()}
    reference = None
    for year in sorted(name_sets):
        if reference is None:
            reference = name_sets[year]
        elif name_sets[year] != reference:
            findings.append("predictor layer names differ between years; one model "
                            "must apply to every year")
            break

    if not findings:
        try:
            ref = read_grid(config.elevation)
            for year, inputs in config.years.items():
                for name, p in sorted(inputs.predictors.items()):
                    g = read_grid(p)
                    if not g.aligned_with(ref):
                        findings.append(f"alignment: predictor {name!r} for {year} "
                                        f"does not match the elevation grid")
                lc = read_grid(inputs.landcover)
                if not lc.aligned_with(ref):
                    findings.append(f"alignment: landcover for {year} does not "
                                    f"match the elevation grid")
        except (OSError, ValueError) as e:
            findings.append(f"unreadable raster: {e}")
    return findings


# -- manifest -------------------------------------------------------------

@dataclass
class StageRecord:
    outputs: list[str]
    config_hash: str
    elapsed_s: float


@dataclass
class RunManifest:
    artifact_version: int
    config_hash: str
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @staticmethod
    def path_in(output_dir) -> Path:
        return Path(output_dir) / "manifest.json"

    @classmethod
    def load(cls, output_dir) -> "RunManifest | None":
        p = cls.path_in(output_dir)
        if not p.is_file():
            return None
        with open(p, encoding="utf-8") as f:
            doc = json.load(f)
        return cls(
            artifact_version=doc["artifact_version"],
            config_hash=doc["config_hash"],
            stages={name: StageRecord(**rec) for name, rec in doc["stages"].items()},
        )

    def save(self, output_dir) -> None:
        doc = {
            "artifact_version": self.artifact_version,
            "config_hash": self.config_hash,
            "stages": {name: asdict(rec) for name, rec in self.stages.items()},
        }
        _write_json(self.path_in(output_dir), doc)


# -- small output helpers -------------------------------------------------

def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, fieldnames, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(fieldnames) + "\n")
        for row in rows:
            f.write(",".join(_fmt_cell(row[k]) for k in fieldnames) + "\n")


def _read_csv(path) -> list[dict]:
    import csv

    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _stage_dir(config: PipelineConfig, stage: str) -> Path:
    d = Path(config.output_dir) / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


def _report_row(rep) -> dict:
    row = asdict(rep)
    return {k: row[k] for k in ASSESSMENT_COLUMNS}


def _opt_float(text: str) -> float | None:
    return float(text) if text != "" else None


# -- stages ---------------------------------------------------------------

def _stage_ingest(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "ingest")
    trees = load_trees(config.trees)
    plot_rows = load_plots(config.plots)
    known_years = set(config.years)
    stray = sorted({p.inventory_year for p in plot_rows} - known_years)
    if stray:
        raise PipelineError(f"plots reference inventory years with no rasters: {stray}")

    selected = select_single_inventory(plot_rows, seed=[config.seed, 101])
    by_year: dict[int, list[PlotRecord]] = {}
    for p in selected:
        by_year.setdefault(p.inventory_year, []).append(p)
    attached: list[PlotRecord] = []
    for year in sorted(by_year):
        year_trees = [t for t in trees if t.inventory_year == year]
        ids = [p.plot_id for p in by_year[year]]
        crm = aggregate_plot_agb(year_trees, "CRM", plot_ids=ids)
        nsvb = aggregate_plot_agb(year_trees, "NSVB", plot_ids=ids)
        attached.extend(attach_densities(by_year[year], crm, nsvb))
    attached.sort(key=lambda p: p.plot_id)

    partition = split_by_panel(attached, config.holdout_panel, seed=[config.seed, 102])
    model_dev = filter_model_dev(partition.dev)

    def plot_dict(p: PlotRecord, role=None) -> dict:
        d = {
            "plot_id": p.plot_id, "x_m": p.x, "y_m": p.y,
            "inventory_year": p.inventory_year, "panel": p.panel,
            "forested_fraction": p.forested_fraction,
            "max_canopy_height_m": p.max_canopy_height_m,
            "agb_crm": p.agb_crm, "agb_nsvb": p.agb_nsvb,
        }
        if role is not None:
            d["role"] = role
        return d

    all_rows = ([plot_dict(p, "development") for p in partition.dev]
                + [plot_dict(p, "assessment") for p in partition.assessment])
    all_rows.sort(key=lambda r: r["plot_id"])
    plots_path = out / "plots.csv"
    _write_csv(plots_path,
               ["plot_id", "x_m", "y_m", "inventory_year", "panel",
                "forested_fraction", "max_canopy_height_m", "agb_crm",
                "agb_nsvb", "role"], all_rows)

    dev_rows = sorted((plot_dict(p) for p in model_dev), key=lambda r: r["plot_id"])
    dev_path = out / "model_dev.csv"
    _write_csv(dev_path,
               ["plot_id", "x_m", "y_m", "inventory_year", "panel",
                "forested_fraction", "max_canopy_height_m", "agb_crm",
                "agb_nsvb"], dev_rows)

    summary_path = out / "summary.json"
    _write_json(summary_path, {
        "n_plot_rows": len(plot_rows),
        "n_selected": len(selected),
        "n_development": len(partition.dev),
        "n_model_dev": len(model_dev),
        "n_assessment": len(partition.assessment),
        "holdout_panel": partition.holdout_panel,
        "per_year": {str(y): len(v) for y, v in sorted(by_year.items())},
    })
    return [plots_path, dev_path, summary_path]


def _plots_from_rows(rows) -> list[PlotRecord]:
    out = []
    for r in rows:
        height = r["max_canopy_height_m"]
        out.append(PlotRecord(
            plot_id=r["plot_id"], x=float(r["x_m"]), y=float(r["y_m"]),
            inventory_year=int(r["inventory_year"]), panel=int(r["panel"]),
            forested_fraction=float(r["forested_fraction"]),
            max_canopy_height_m=float(height) if height not in ("", "None") else None,
            agb_crm=float(r["agb_crm"]), agb_nsvb=float(r["agb_nsvb"]),
        ))
    return out


def _stage_extract(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "extract")
    dev = _plots_from_rows(_read_csv(Path(config.output_dir) / "ingest" / "model_dev.csv"))
    names = config.predictor_names()

    rows = []
    n_dropped = 0
    for year in sorted(config.years):
        layers = {name: read_grid(p)
                  for name, p in sorted(config.years[year].predictors.items())}
        for p in [q for q in dev if q.inventory_year == year]:
            # overlap weights depend only on geometry, shared by all layers
            weights = pixel_overlap_weights(PlotFootprint(p.x, p.y),
                                            next(iter(layers.values())))
            feats = {}
            usable = True
            for name in names:
                v = weighted_mean(layers[name], weights)
                if v is None:
                    usable = False
                    break
                feats[name] = v
            if not usable:
                n_dropped += 1
                continue
            row = {"plot_id": p.plot_id, "inventory_year": p.inventory_year,
                   "agb_crm": p.agb_crm, "agb_nsvb": p.agb_nsvb}
            row.update(feats)
            rows.append(row)
    rows.sort(key=lambda r: r["plot_id"])
    if n_dropped:
        LOGGER.warning("extraction dropped %d plots with no overlapping valid cells",
                       n_dropped)

    features_path = out / "features.csv"
    _write_csv(features_path,
               ["plot_id", "inventory_year", "agb_crm", "agb_nsvb"] + names, rows)
    summary_path = out / "summary.json"
    _write_json(summary_path, {
        "n_rows": len(rows),
        "n_dropped_no_coverage": n_dropped,
        "predictors": names,
    })
    return [features_path, summary_path]


def _stage_fit(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "fit")
    rows = _read_csv(Path(config.output_dir) / "extract" / "features.csv")
    if len(rows) < 10:
        raise PipelineError(f"only {len(rows)} feature rows; too few to fit models")
    names = config.predictor_names()
    ids = [r["plot_id"] for r in rows]
    X = np.array([[float(r[name]) for name in names] for r in rows], dtype=np.float64)
    y_by_allom = {
        "CRM": np.array([float(r["agb_crm"]) for r in rows]),
        "NSVB": np.array([float(r["agb_nsvb"]) for r in rows]),
    }

    n = len(rows)
    rng = np.random.default_rng([config.seed, 301])
    perm = rng.permutation(n)
    n_train = int(round(config.train_frac * n))
    n_train = min(max(n_train, config.cv_folds), n - 1)
    train_idx, test_idx = perm[:n_train], perm[n_train:]

    grids = config.spec_grids()
    kinds = sorted(grids)
    outputs = []
    summary: dict = {
        "n_rows": n, "n_train": int(n_train), "n_test": int(n - n_train),
        "kinds": kinds, "models": {},
    }
    test_rows = []
    for a_idx, allometry in enumerate(ALLOMETRIES):
        y = y_by_allom[allometry]
        Xtr, ytr = X[train_idx], y[train_idx]
        Xte, yte = X[test_idx], y[test_idx]

        chosen: list[LearnerSpec] = []
        oof_cols = []
        model_info = {}
        for k_idx, kind in enumerate(kinds):
            cv_seed = [config.seed, 310, a_idx, k_idx]
            best, scores = grid_search(grids[kind], Xtr, ytr, k=config.cv_folds,
                                       seed=cv_seed, return_scores=True)
            chosen.append(best)
            oof_cols.append(cv_predict(best, Xtr, ytr, k=config.cv_folds, seed=cv_seed))
            model_info[kind] = {
                "chosen": best.to_dict(),
                "cv_rmse": {json.dumps(s.to_dict(), sort_keys=True): r
                            for s, r in scores},
            }
        stack = fit_stack(np.column_stack(oof_cols), ytr)
        if stack.rank_deficient:
            LOGGER.warning("stacking design for %s is rank deficient; "
                           "minimal-norm coefficients used", allometry)
        models = [train_base(spec, Xtr, ytr, seed=[config.seed, 320, a_idx, k_idx])
                  for k_idx, spec in enumerate(chosen)]
        ens = EnsembleModel(specs=chosen, models=models, stack=stack,
                            feature_names=names, ybar_train=float(ytr.mean()))
        model_path = out / f"model_{allometry}.json"
        with open(model_path, "w", encoding="utf-8") as f:
            f.write(ens.to_json())
        outputs.append(model_path)

        test_ids = [ids[i] for i in test_idx]
        pairs = PairedSample(ids=test_ids, y=yte, yhat=ens.predict(Xte))
        rep = basic_metrics(pairs, ybar_train=float(ytr.mean()))
        row = _report_row(rep)
        row["dr"] = willmott_dr(pairs)
        row["scale_km"] = None
        row["pph"] = None
        row = {"allometry": allometry, **{k: row[k] for k in ASSESSMENT_COLUMNS
                                         if k not in ("scale_km", "pph")}}
        test_rows.append(row)
        summary["models"][allometry] = {
            "base": model_info,
            "stack_intercept": stack.intercept,
            "stack_coefficients": list(stack.coefficients),
            "rank_deficient": bool(stack.rank_deficient),
            "ybar_train": float(ytr.mean()),
            "test_metrics": {k: row[k] for k in row if k != "allometry"},
        }

    test_path = out / "test_metrics.csv"
    _write_csv(test_path, ["allometry", "n", "mae", "pct_mae", "rmse",
                           "pct_rmse", "me", "r2", "dr"], test_rows)
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    return outputs + [test_path, summary_path]


def _load_model(config: PipelineConfig, allometry: str) -> EnsembleModel:
    p = Path(config.output_dir) / "fit" / f"model_{allometry}.json"
    with open(p, encoding="utf-8") as f:
        return EnsembleModel.from_json(f.read())


def _map_path(config: PipelineConfig, kind: str, year: int, allometry: str) -> Path:
    return Path(config.output_dir) / "predict" / f"{kind}_{year}_{allometry}.bin"


def _stage_predict(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "predict")
    outputs = []
    map_summaries = {}
    for allometry in ALLOMETRIES:
        model = _load_model(config, allometry)
        for year in sorted(config.years):
            layers = {name: read_grid(p)
                      for name, p in sorted(config.years[year].predictors.items())}
            pred = predict_grid(model, layers)
            lc = read_grid(config.years[year].landcover)
            masked = mask_landcover(pred, lc, config.removed_landcover_classes)
            agb_path = _map_path(config, "agb", year, allometry)
            write_grid(masked, agb_path)
            ranked = percent_rank(masked)
            rank_path = _map_path(config, "pctrank", year, allometry)
            write_grid(ranked, rank_path)
            outputs.extend([agb_path, rank_path])
            map_summaries[f"{year}_{allometry}"] = asdict(summarize(masked))
    summary_path = out / "summary.json"
    _write_json(summary_path, {"maps": map_summaries})
    return outputs + [summary_path]


def _stage_assess(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "assess")
    rows = _read_csv(Path(config.output_dir) / "ingest" / "plots.csv")
    assessment = _plots_from_rows([r for r in rows if r["role"] == "assessment"])
    assessment.sort(key=lambda p: p.plot_id)

    scales = [1] + [s for s in config.scales_km if s != 1]
    outputs = []
    summary: dict = {}
    plot_weights = {}  # shared across allometries; maps share one geometry
    for allometry in ALLOMETRIES:
        model = _load_model(config, allometry)
        maps = {year: read_grid(_map_path(config, "agb", year, allometry))
                for year in sorted(config.years)}
        if not plot_weights:
            geom = next(iter(maps.values()))
            plot_weights = {
                p.plot_id: pixel_overlap_weights(PlotFootprint(p.x, p.y), geom)
                for p in assessment}
        ids, ys, yhats, locs, pair_rows = [], [], [], [], []
        n_outside = 0
        for p in assessment:
            yhat = weighted_mean(maps[p.inventory_year], plot_weights[p.plot_id])
            if yhat is None:
                n_outside += 1
                continue
            ids.append(p.plot_id)
            ys.append(p.agb(allometry))
            yhats.append(yhat)
            locs.append((p.x, p.y))
            pair_rows.append({"plot_id": p.plot_id, "x_m": p.x, "y_m": p.y,
                              "inventory_year": p.inventory_year,
                              "y": p.agb(allometry), "yhat": yhat})
        if len(ids) < 2:
            raise PipelineError(
                f"only {len(ids)} assessment plots fall inside the mapped area")
        pairs = PairedSample(ids=ids, y=np.array(ys), yhat=np.array(yhats))
        reports = multiscale_assessment(pairs, np.array(locs), spacings_km=scales,
                                        ybar_train=model.ybar_train)
        table_path = out / f"assessment_{allometry}.csv"
        _write_csv(table_path, list(ASSESSMENT_COLUMNS),
                   [_report_row(rep) for rep in reports])
        pairs_path = out / f"pairs_{allometry}.csv"
        _write_csv(pairs_path, ["plot_id", "x_m", "y_m", "inventory_year",
                                "y", "yhat"], pair_rows)
        outputs.extend([table_path, pairs_path])
        plot_level = _report_row(reports[0])
        summary[allometry] = {
            "n_pairs": len(ids),
            "n_outside_mapped_area": n_outside,
            "ybar_train": model.ybar_train,
            "ks_reference_vs_predicted": ks_statistic(np.array(ys), np.array(yhats)),
            "plot_to_pixel": plot_level,
        }
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    return outputs + [summary_path]


def _agreement_row(scale_km, y, yhat) -> dict:
    row = {"scale_km": scale_km, "n": int(y.size), "ac": None,
           "ac_systematic": None, "ac_unsystematic": None,
           "gmfr_intercept": None, "gmfr_slope": None}
    if y.size < 2:
        return row
    pairs = PairedSample(ids=[str(i) for i in range(y.size)], y=y, yhat=yhat)
    try:
        dec = ac_decompose(pairs)
        row.update(ac=dec.ac, ac_systematic=dec.ac_systematic,
                   ac_unsystematic=dec.ac_unsystematic)
    except ValueError:
        pass
    try:
        line = gmfr_fit(pairs)
        row.update(gmfr_intercept=line.a, gmfr_slope=line.b)
    except ValueError:
        pass
    return row


def _stage_agree(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "agree")
    outputs = []
    summary = {}
    for year in sorted(config.years):
        crm = read_grid(_map_path(config, "agb", year, "CRM"))
        nsvb = read_grid(_map_path(config, "agb", year, "NSVB"))
        joint = crm.mask & nsvb.mask
        y = crm.values[joint].astype(np.float64)
        yhat = nsvb.values[joint].astype(np.float64)
        xs, ys_axis = crm.cell_centers()
        xx, yy = np.meshgrid(xs, ys_axis)
        locs = np.column_stack([xx[joint], yy[joint]])

        rows = [_agreement_row(1.0, y, yhat)]
        for s_km in [s for s in config.scales_km if s != 1]:
            spacing = float(s_km) * 1000.0
            if locs.size == 0:
                rows.append(_agreement_row(float(s_km), np.empty(0), np.empty(0)))
                continue
            bbox = (float(locs[:, 0].min()), float(locs[:, 1].min()),
                    float(locs[:, 0].max()), float(locs[:, 1].max()))
            hexes = make_hexgrid(bbox, spacing)
            cells = aggregate_pairs(SimpleNamespace(y=y, yhat=yhat), locs, hexes)
            ym = np.array([c.y_mean for c in cells])
            yhm = np.array([c.yhat_mean for c in cells])
            rows.append(_agreement_row(float(s_km), ym, yhm))
        table_path = out / f"agreement_{year}.csv"
        _write_csv(table_path, ["scale_km", "n", "ac", "ac_systematic",
                                "ac_unsystematic", "gmfr_intercept", "gmfr_slope"],
                   rows)
        outputs.append(table_path)
        summary[str(year)] = {"n_joint_cells": int(y.size), "cell_level": rows[0]}
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    return outputs + [summary_path]


def _stage_diff(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "diff")
    outputs = []
    summaries = {}

    def emit(name: str, grid: Grid) -> None:
        p = out / f"{name}.bin"
        write_grid(grid, p)
        outputs.append(p)
        summaries[name] = asdict(summarize(grid))

    for year in sorted(config.years):
        crm = read_grid(_map_path(config, "agb", year, "CRM"))
        nsvb = read_grid(_map_path(config, "agb", year, "NSVB"))
        emit(f"agb_diff_{year}", difference(nsvb, crm))
        crm_r = read_grid(_map_path(config, "pctrank", year, "CRM"))
        nsvb_r = read_grid(_map_path(config, "pctrank", year, "NSVB"))
        emit(f"pctrank_diff_{year}", difference(nsvb_r, crm_r))

    years = sorted(config.years)
    if len(years) >= 2:
        first, last = years[0], years[-1]
        changes = {}
        for allometry in ALLOMETRIES:
            early = read_grid(_map_path(config, "agb", first, allometry))
            late = read_grid(_map_path(config, "agb", last, allometry))
            changes[allometry] = difference(late, early)
            emit(f"change_{allometry}", changes[allometry])
        emit("change_diff", difference(changes["NSVB"], changes["CRM"]))

    summary_path = out / "summary.json"
    _write_json(summary_path, summaries)
    return outputs + [summary_path]


def _stage_stocks(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "stocks")
    rows = _read_csv(Path(config.output_dir) / "ingest" / "plots.csv")
    plots = _plots_from_rows(rows)
    fraction_rows = carbon_mod.load_carbon_fractions(config.carbon_fractions)

    years = sorted(config.years)
    fractions = {}
    for year in years:
        year_rows = [r for r in fraction_rows if r.year == year]
        if not year_rows:
            raise PipelineError(f"no carbon fractions for year {year}")
        fractions[year] = {"CRM": carbon_mod.CRM_CARBON_FRACTION,
                           "NSVB": carbon_mod.weighted_carbon_fraction(year_rows)}

    estimates: list[carbon_mod.StockEstimate] = []
    for year in years:
        year_plots = [p for p in plots if p.inventory_year == year]
        for allometry in ALLOMETRIES:
            grid = read_grid(_map_path(config, "agb", year, allometry))
            design_area = (config.region_area_ha if config.region_area_ha is not None
                           else grid.ncols * grid.nrows * grid.cell_area_ha())
            model_variants = [
                carbon_mod.model_stock(grid, year, allometry, area_basis="extent"),
                carbon_mod.model_stock(grid, year, allometry, area_basis="valid"),
            ]
            if config.region_area_ha is not None:
                model_variants.append(carbon_mod.model_stock(
                    grid, year, allometry, region_area_ha=config.region_area_ha))
            design = carbon_mod.design_stock(year_plots, design_area, year, allometry)
            for est in model_variants + [design]:
                estimates.append(est)
                estimates.append(carbon_mod.agb_to_agc(est, fractions[year][allometry]))

    def sort_key(e: carbon_mod.StockEstimate):
        return (e.quantity, e.method, e.allometry, e.area_basis or "", e.year)

    estimates.sort(key=sort_key)
    stock_rows = [{
        "quantity": e.quantity, "method": e.method, "allometry": e.allometry,
        "area_basis": e.area_basis, "year": e.year, "total_mt": e.total_mt,
        "region_area_ha": e.region_area_ha,
    } for e in estimates]

    change_rows = []
    if len(years) >= 2:
        first, last = years[0], years[-1]
        groups: dict[tuple, dict[int, carbon_mod.StockEstimate]] = {}
        for e in estimates:
            groups.setdefault((e.quantity, e.method, e.allometry, e.area_basis),
                              {})[e.year] = e
        for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
            pair = groups[key]
            if first in pair and last in pair:
                delta = carbon_mod.stock_change(pair[last], pair[first])
                change_rows.append({
                    "quantity": key[0], "method": key[1], "allometry": key[2],
                    "area_basis": key[3], "year": f"{last}-{first}",
                    "total_mt": delta, "region_area_ha": pair[last].region_area_ha,
                })

    stocks_path = out / "stocks.csv"
    _write_csv(stocks_path, ["quantity", "method", "allometry", "area_basis",
                             "year", "total_mt", "region_area_ha"],
               stock_rows + change_rows)

    # design minus model, the sign convention used for comparison columns
    model_basis = "given" if config.region_area_ha is not None else "extent"
    by_key = {(e.quantity, e.method, e.allometry, e.area_basis, e.year): e
              for e in estimates}
    diff_rows = []
    for e in estimates:
        if e.method != "design":
            continue
        m = by_key.get((e.quantity, "model", e.allometry, model_basis, e.year))
        if m is not None:
            diff_rows.append({
                "quantity": e.quantity, "allometry": e.allometry, "year": e.year,
                "design_mt": e.total_mt, "model_mt": m.total_mt,
                "design_minus_model_mt": e.total_mt - m.total_mt,
            })
    diff_rows.sort(key=lambda r: (r["quantity"], r["allometry"], r["year"]))
    diff_path = out / "design_minus_model.csv"
    _write_csv(diff_path, ["quantity", "allometry", "year", "design_mt",
                           "model_mt", "design_minus_model_mt"], diff_rows)

    summary_path = out / "stocks.json"
    _write_json(summary_path, {
        "note": carbon_mod.DESIGN_ESTIMATOR_NOTE,
        "carbon_fractions": {str(y): fractions[y] for y in years},
        "stocks": stock_rows + change_rows,
        "design_minus_model": diff_rows,
        "model_basis_for_comparison": model_basis,
    })
    return [stocks_path, diff_path, summary_path]


def _stage_rescale(config: PipelineConfig) -> list[Path]:
    out = _stage_dir(config, "rescale")
    elevation = read_grid(config.elevation)
    rows = []
    for y_idx, year in enumerate(sorted(config.years)):
        nsvb = read_grid(_map_path(config, "agb", year, "NSVB"))
        crm = read_grid(_map_path(config, "agb", year, "CRM"))
        fit = carbon_mod.rescale_fit(nsvb, crm, elevation,
                                     n_sample=config.rescale_sample,
                                     train_frac=config.train_frac,
                                     seed=[config.seed, 701, y_idx])
        rows.append({"year": year, "intercept": fit.intercept,
                     "coef_source": fit.coef_source,
                     "coef_elevation": fit.coef_elevation,
                     "n_train": fit.n_train, "n_test": fit.n_test,
                     "test_rmse": fit.test_rmse, "test_mae": fit.test_mae,
                     "test_me": fit.test_me, "test_r2": fit.test_r2})
    table_path = out / "rescale.csv"
    _write_csv(table_path, ["year", "intercept", "coef_source", "coef_elevation",
                            "n_train", "n_test", "test_rmse", "test_mae",
                            "test_me", "test_r2"], rows)
    summary_path = out / "summary.json"
    _write_json(summary_path, {str(r["year"]): r for r in rows})
    return [table_path, summary_path]


_STAGE_FUNCTIONS = {
    "ingest": _stage_ingest,
    "extract": _stage_extract,
    "fit": _stage_fit,
    "predict": _stage_predict,
    "assess": _stage_assess,
    "agree": _stage_agree,
    "diff": _stage_diff,
    "stocks": _stage_stocks,
    "rescale": _stage_rescale,
}


def run(config: PipelineConfig, stages=None) -> RunManifest:
    """Execute the requested stages in dependency order.

    Stages not requested are reused from cache: their manifest entries must
    exist, match the current configuration hash, and still have their files
    on disk. Requested stages always re-execute (outputs are deterministic).
    """
    requested = set(STAGE_ORDER if stages is None else stages)
    unknown = sorted(requested - set(STAGE_ORDER))
    if unknown:
        raise ValueError(f"unknown stages: {unknown}")
    ordered = [s for s in STAGE_ORDER if s in requested]

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.load(out_dir)
    if manifest is None:
        manifest = RunManifest(artifact_version=ARTIFACT_VERSION,
                               config_hash=config.config_hash)

    for stage in ordered:
        for dep in DEPENDENCIES[stage]:
            if dep in requested:
                continue  # runs earlier in this invocation
            rec = manifest.stages.get(dep)
            if rec is None:
                raise PipelineError(
                    f"missing upstream artifact: stage {stage!r} needs {dep!r}, "
                    f"which has not been run")
            if rec.config_hash != config.config_hash:
                raise PipelineError(
                    f"config hash mismatch: cached {dep!r} outputs were built "
                    f"from a different configuration; rerun it")
            gone = [p for p in rec.outputs if not (out_dir / p).exists()]
            if gone:
                raise PipelineError(
                    f"missing upstream artifact: {dep!r} output {gone[0]!r} "
                    f"is recorded in the manifest but absent on disk")

    for stage in ordered:
        LOGGER.info("running stage %s", stage)
        start = time.perf_counter()
        outputs = _STAGE_FUNCTIONS[stage](config)
        elapsed = time.perf_counter() - start
        rel = [p.relative_to(out_dir).as_posix() for p in outputs]
        manifest.stages[stage] = StageRecord(outputs=rel,
                                             config_hash=config.config_hash,
                                             elapsed_s=elapsed)
        manifest.config_hash = config.config_hash
        manifest.save(out_dir)
    return manifest


# -- report rendering -----------------------------------------------------

def _fmt_num(v, places=2) -> str:
    if v is None or v == "":
        return "-"
    return f"{float(v):.{places}f}"


def _cell_text(v, name, places) -> str:
    if v is None or v == "":
        return "-"
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            return v  # textual label, e.g. a year span or a basis name
    if name in ("n", "year", "n_train", "n_test", "scale_km") and v == int(v):
        return str(int(v))
    return _fmt_num(v, places)


def _render_table(title, fieldnames, rows, places=2) -> list[str]:
    lines = [title]
    cells = [[name for name in fieldnames]]
    for row in rows:
        cells.append([_cell_text(row.get(name), name, places)
                      for name in fieldnames])
    widths = [max(len(r[i]) for r in cells) for i in range(len(fieldnames))]
    for i, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return lines


def render_report(config: PipelineConfig, cap: float | None = None) -> str:
    """Human-readable summary of everything the run produced so far.

    `cap` clamps difference-map values to [-cap, +cap] in the rendered
    summaries only; stored grids are never modified.
    """
    out_dir = Path(config.output_dir)
    manifest = RunManifest.load(out_dir)
    if manifest is None:
        raise PipelineError(f"no run manifest under {out_dir}; nothing to report")

    lines = ["run report", "==========",
             f"output directory: {out_dir}",
             f"configuration hash: {manifest.config_hash}",
             f"stages completed: {', '.join(s for s in STAGE_ORDER if s in manifest.stages)}",
             ""]

    def stage_file(stage, name):
        p = out_dir / stage / name
        return p if stage in manifest.stages and p.is_file() else None

    p = stage_file("ingest", "summary.json")
    if p:
        with open(p, encoding="utf-8") as f:
            s = json.load(f)
        lines += [f"plots: {s['n_selected']} selected "
                  f"({s['n_model_dev']} model development after filtering, "
                  f"{s['n_assessment']} assessment, holdout panel "
                  f"{s['holdout_panel']})", ""]

    p = stage_file("fit", "test_metrics.csv")
    if p:
        lines += _render_table("model test-set metrics",
                               ["allometry", "n", "mae", "pct_mae", "rmse",
                                "pct_rmse", "me", "r2", "dr"], _read_csv(p))
        lines.append("")

    for allometry in ALLOMETRIES:
        p = stage_file("assess", f"assessment_{allometry}.csv")
        if p:
            lines += _render_table(
                f"map assessment, {allometry} (scale 1 = plot to pixel)",
                list(ASSESSMENT_COLUMNS), _read_csv(p))
            lines.append("")

    p = stage_file("assess", "summary.json")
    if p:
        with open(p, encoding="utf-8") as f:
            s = json.load(f)
        for allometry in ALLOMETRIES:
            if allometry in s:
                lines.append(f"KS distance, reference vs predicted ({allometry}): "
                             f"{_fmt_num(s[allometry]['ks_reference_vs_predicted'])}")
        lines.append("")

    agree_files = sorted(out_dir.glob("agree/agreement_*.csv")) \
        if "agree" in manifest.stages else []
    for p in agree_files:
        year = p.stem.split("_")[-1]
        lines += _render_table(f"two-map agreement, {year} (CRM vs NSVB)",
                               ["scale_km", "n", "ac", "ac_systematic",
                                "ac_unsystematic", "gmfr_intercept", "gmfr_slope"],
                               _read_csv(p), places=4)
        lines.append("")

    if "diff" in manifest.stages:
        rows = []
        for p in sorted(out_dir.glob("diff/*.bin")):
            g = read_grid(p)
            if cap is not None:
                vals = np.clip(g.values, -abs(cap), abs(cap))
                g = g.with_values(vals, g.mask.copy())
            s = summarize(g)
            rows.append({"layer": p.stem, "n": s.n_valid, "mean": s.mean,
                         "min": s.min, "max": s.max})
        title = "difference layers" + (f" (display cap +/- {abs(cap):g})"
                                       if cap is not None else "")
        lines += _render_table(title, ["layer", "n", "mean", "min", "max"], rows)
        lines.append("")

    p = stage_file("stocks", "stocks.json")
    if p:
        with open(p, encoding="utf-8") as f:
            s = json.load(f)
        lines += _render_table("stocks and stock changes (Mt)",
                               ["quantity", "method", "allometry", "area_basis",
                                "year", "total_mt"], s["stocks"])
        lines.append("")
        lines += _render_table("design minus model (Mt)",
                               ["quantity", "allometry", "year", "design_mt",
                                "model_mt", "design_minus_model_mt"],
                               s["design_minus_model"])
        lines += ["", f"note: {s['note']}", ""]

    p = stage_file("rescale", "rescale.csv")
    if p:
        lines += _render_table("allometry rescaling (NSVB from CRM and elevation)",
                               ["year", "intercept", "coef_source", "coef_elevation",
                                "n_train", "n_test", "test_rmse", "test_r2"],
                               _read_csv(p), places=4)
        lines.append("")
    return "\n".join(lines)
