"""Deterministic synthetic demo dataset.

Generates a small landscape (rasters), a plot inventory with tree lists,
species carbon-fraction tables, and a ready-to-run pipeline configuration.
The world is sized for tests but exercises every stage: two map years,
removable landcover classes, plots measured in one or both years, a mix of
forested and nonforested plots, and predictor layers carrying a learnable
biomass signal. The two reference allometries are tied by a fixed linear
relationship through elevation so the rescaling stage has something to find.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .grid import Grid, write_grid
from .inventory import PLOT_AREA_HA

YEARS = (2005, 2019)
# classes 1, 2, 4, 5 stand in for developed, cropland, water, and barren
REMOVED_CLASSES = (1, 2, 4, 5)
SPECIES = ("ABBA", "ACRU", "PIST", "QURU", "TSCA")
PREDICTOR_NAMES = ("brightness", "greenness", "wetness", "ratio_a",
                   "ratio_b", "dist_age")

# linear tie between the two allometries used when generating reference data
RESCALE_INTERCEPT = 9.555
RESCALE_SLOPE_SOURCE = 1.135
RESCALE_SLOPE_ELEV = -0.023


def _smooth_field(rng, xx, yy, n_waves=6, wavelengths=(6e3, 45e3)):
    """Sum of random plane waves, standardized to zero mean and unit spread."""
    f = np.zeros_like(xx)
    for _ in range(n_waves):
        wl = rng.uniform(*wavelengths)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        k = 2.0 * np.pi / wl
        f += rng.uniform(0.5, 1.0) * np.sin(k * (np.cos(theta) * xx
                                                 + np.sin(theta) * yy) + phase)
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def _standardize(a):
    sd = a.std()
    return (a - a.mean()) / (sd if sd > 0 else 1.0)


def _cell_index(grid: Grid, x, y):
    col = int(np.floor((x - grid.x_origin) / grid.cellsize))
    row = int(np.floor((grid.y_max - y) / grid.cellsize))
    return row, col


def _landcover(rng, xx, yy, elev, forest_potential):
    lc = np.full(xx.shape, 3.0)
    wet = _smooth_field(rng, xx, yy, n_waves=4)
    use = _smooth_field(rng, xx, yy, n_waves=4)
    lc[forest_potential > 0.4] = 6.0
    lc[(forest_potential > -0.3) & (forest_potential <= 0.4)] = 7.0
    lc[wet < np.quantile(wet, 0.06)] = 8.0
    lc[use > np.quantile(use, 0.92)] = 1.0
    band = (use > np.quantile(use, 0.84)) & (use <= np.quantile(use, 0.92))
    lc[band] = 2.0
    lc[wet < np.quantile(wet, 0.02)] = 4.0
    lc[elev > np.quantile(elev, 0.985)] = 5.0
    return lc


def _predictors(rng, agb, elev, xx, yy):
    """Six layers: three informative, one weakly informative, two nuisance."""
    z = _standardize(agb)
    layers = {
        "brightness": -0.6 * z + 0.3 * _smooth_field(rng, xx, yy)
                      + rng.normal(0.0, 0.25, agb.shape),
        "greenness": agb / (agb + 120.0) + rng.normal(0.0, 0.03, agb.shape),
        "wetness": 0.8 * z + rng.normal(0.0, 0.35, agb.shape),
        "ratio_a": 0.25 * z + 0.5 * _standardize(elev)
                   + rng.normal(0.0, 0.3, agb.shape),
        "ratio_b": _smooth_field(rng, xx, yy) + rng.normal(0.0, 0.2, agb.shape),
        "dist_age": _smooth_field(rng, xx, yy, n_waves=3)
                    + rng.normal(0.0, 0.2, agb.shape),
    }
    return {name: layers[name] for name in PREDICTOR_NAMES}


def _tree_rows(rng, plot_id, year, crm_density, nsvb_density):
    """Tree list whose kept trees aggregate back to the plot densities."""
    rows = []
    if crm_density > 0.0:
        total_kg = crm_density * PLOT_AREA_HA * 1000.0
        m = max(1, int(rng.poisson(crm_density / 8.0)))
        w = rng.gamma(1.5, size=m)
        w /= w.sum()
        ratio = nsvb_density / crm_density
        for kg in total_kg * w:
            rows.append({
                "plot_id": plot_id,
                "subplot": int(rng.integers(1, 5)),
                "species_code": SPECIES[int(rng.integers(0, len(SPECIES)))],
                "dbh_cm": round(12.7 + 47.0 * rng.beta(1.2, 3.0), 1),
                "agb_crm_kg": repr(round(float(kg), 6)),
                "agb_nsvb_kg": repr(round(float(kg * ratio), 6)),
                "inventory_year": year,
            })
    # occasional sub-threshold stem; ingest drops these with a warning
    if rng.random() < 0.02:
        rows.append({
            "plot_id": plot_id,
            "subplot": int(rng.integers(1, 5)),
            "species_code": SPECIES[int(rng.integers(0, len(SPECIES)))],
            "dbh_cm": round(rng.uniform(3.0, 12.0), 1),
            "agb_crm_kg": repr(round(float(rng.uniform(0.5, 8.0)), 6)),
            "agb_nsvb_kg": repr(round(float(rng.uniform(0.5, 8.0)), 6)),
            "inventory_year": year,
        })
    return rows


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(",".join(fieldnames) + "\n")
        for row in rows:
            f.write(",".join(str(row[k]) for k in fieldnames) + "\n")


def synthesize(out_dir, seed: int = 0, ncols: int = 200, nrows: int = 200,
               cellsize: float = 300.0, n_plots: int = 300) -> Path:
    """Write the dataset plus a pipeline configuration; return the config path.

    Layout under out_dir: inputs/ holds rasters and tables, config.json points
    at them with relative paths, and the configured output directory is run/.
    """
    out = Path(out_dir)
    inputs = out / "inputs"
    inputs.mkdir(parents=True, exist_ok=True)

    xs = (np.arange(ncols) + 0.5) * cellsize
    ys = (nrows - np.arange(nrows) - 0.5) * cellsize
    xx, yy = np.meshgrid(xs, ys)

    rng_land = np.random.default_rng([seed, 1])
    elev = 600.0 + 260.0 * _smooth_field(rng_land, xx, yy, n_waves=5)
    elev = np.clip(elev, 0.0, None)
    forest_potential = _smooth_field(rng_land, xx, yy, n_waves=5)

    def make_grid(values, units):
        return Grid(ncols=ncols, nrows=nrows, x_origin=0.0, y_origin=0.0,
                    cellsize=cellsize, units=units,
                    values=np.asarray(values, dtype=np.float32))

    write_grid(make_grid(elev, "m"), inputs / "elevation.bin")

    landcover = {}
    agb_true = {}
    rng_lc = np.random.default_rng([seed, 2])
    lc05 = _landcover(rng_lc, xx, yy, elev, forest_potential)
    lc19 = lc05.copy()
    # one compact conversion blob so the later year loses mapped area
    blob = _smooth_field(np.random.default_rng([seed, 3]), xx, yy, n_waves=3)
    lc19[(blob > np.quantile(blob, 0.97)) & ~np.isin(lc05, REMOVED_CLASSES)] = 1.0
    landcover[2005], landcover[2019] = lc05, lc19

    rng_agb = np.random.default_rng([seed, 4])
    base = (150.0 / (1.0 + np.exp(-1.3 * forest_potential))
            + 35.0 * _smooth_field(rng_agb, xx, yy)
            + 0.03 * (800.0 - elev))
    agb05 = np.clip(base, 0.0, 350.0)
    agb05[np.isin(lc05, REMOVED_CLASSES)] = 0.0
    growth = 1.10 + 0.04 * _smooth_field(rng_agb, xx, yy, n_waves=4)
    agb19 = np.clip(agb05 * growth + 6.0, 0.0, 380.0)
    agb19[agb05 == 0.0] = 0.0
    agb19[np.isin(lc19, REMOVED_CLASSES)] = 0.0
    agb_true[2005], agb_true[2019] = agb05, agb19

    year_paths = {}
    for year in YEARS:
        lc_path = inputs / f"landcover_{year}.bin"
        write_grid(make_grid(landcover[year], "class"), lc_path)
        rng_pred = np.random.default_rng([seed, 5, year])
        preds = _predictors(rng_pred, agb_true[year], elev, xx, yy)
        pred_paths = {}
        for name, layer in preds.items():
            p = inputs / f"pred_{year}_{name}.bin"
            write_grid(make_grid(layer, ""), p)
            pred_paths[name] = f"inputs/pred_{year}_{name}.bin"
        year_paths[str(year)] = {
            "predictors": pred_paths,
            "landcover": f"inputs/landcover_{year}.bin",
        }

    # -- plots and trees --------------------------------------------------
    rng_plot = np.random.default_rng([seed, 6])
    margin = 2.0 * cellsize
    plot_rows = []
    tree_rows = []
    demo_grid = make_grid(agb05, "")
    for i in range(n_plots):
        pid = f"P{i:04d}"
        x = float(rng_plot.uniform(margin, ncols * cellsize - margin))
        y = float(rng_plot.uniform(margin, nrows * cellsize - margin))
        panel = int(rng_plot.integers(1, 6))
        u = rng_plot.random()
        years = YEARS if u < 0.3 else (YEARS[int(rng_plot.integers(0, 2))],)
        for year in years:
            row, col = _cell_index(demo_grid, x, y)
            on_removed = landcover[year][row, col] in REMOVED_CLASSES
            crm_true = float(agb_true[year][row, col])
            nsvb_true = 0.0 if crm_true == 0.0 else max(
                0.0, RESCALE_INTERCEPT + RESCALE_SLOPE_SOURCE * crm_true
                + RESCALE_SLOPE_ELEV * float(elev[row, col]))
            u2 = rng_plot.random()
            if on_removed or crm_true == 0.0 or u2 < 0.05:
                forested, crm_d, nsvb_d = 0.0, 0.0, 0.0
                height = (round(rng_plot.uniform(1.5, 8.0), 1)
                          if rng_plot.random() < 0.25
                          else round(rng_plot.uniform(0.0, 1.0), 1))
            elif u2 < 0.13:
                # partially forested: measured but unusable for model fitting
                forested = round(rng_plot.uniform(0.1, 0.9), 2)
                frac_noise = rng_plot.normal(1.0, 0.08)
                crm_d = max(0.0, crm_true * forested * frac_noise)
                nsvb_d = max(0.0, nsvb_true * forested * frac_noise)
                height = ""
            else:
                forested = 1.0
                frac_noise = rng_plot.normal(1.0, 0.08)
                crm_d = max(0.0, crm_true * frac_noise)
                nsvb_d = max(0.0, nsvb_true * frac_noise)
                height = ""
            plot_rows.append({
                "plot_id": pid,
                "x_m": repr(round(x, 2)),
                "y_m": repr(round(y, 2)),
                "inventory_year": year,
                "panel": panel,
                "forested_fraction": forested,
                "max_canopy_height_m": height,
            })
            tree_rows.extend(_tree_rows(rng_plot, pid, year, crm_d, nsvb_d))

    _write_csv(inputs / "plots.csv",
               ["plot_id", "x_m", "y_m", "inventory_year", "panel",
                "forested_fraction", "max_canopy_height_m"], plot_rows)
    _write_csv(inputs / "trees.csv",
               ["plot_id", "subplot", "species_code", "dbh_cm",
                "agb_crm_kg", "agb_nsvb_kg", "inventory_year"], tree_rows)

    rng_frac = np.random.default_rng([seed, 7])
    frac_rows = []
    for year in YEARS:
        shares = rng_frac.dirichlet(np.full(len(SPECIES), 5.0))
        shares = np.round(shares, 6)
        shares[-1] = 1.0 - shares[:-1].sum()  # exact unit sum
        for sp, share in zip(SPECIES, shares):
            frac_rows.append({
                "species_code": sp,
                "fraction": round(float(rng_frac.uniform(0.46, 0.52)), 4),
                "agb_share": repr(float(share)),
                "year": year,
            })
    _write_csv(inputs / "carbon_fractions.csv",
               ["species_code", "fraction", "agb_share", "year"], frac_rows)

    config = {
        "seed": seed,
        "output_dir": "run",
        "holdout_panel": 3,
        "scales_km": [2, 5, 10, 20, 50],
        "removed_landcover_classes": list(REMOVED_CLASSES),
        "trees": "inputs/trees.csv",
        "plots": "inputs/plots.csv",
        "carbon_fractions": "inputs/carbon_fractions.csv",
        "elevation": "inputs/elevation.bin",
        "years": year_paths,
        "learner_grids": {
            "knn": [{"k": 3}, {"k": 10}],
            "bagged_trees": [
                {"trees": 30, "max_depth": 8, "max_features": "sqrt"},
                {"trees": 30, "max_depth": 16, "max_features": "sqrt"},
            ],
            "boosted_trees": [
                {"trees": 60, "learning_rate": 0.1, "max_depth": 3},
            ],
        },
    }
    config_path = out / "config.json"
    with open(config_path, "w", encoding="utf-8") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")
    return config_path
