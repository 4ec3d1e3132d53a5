"""Biomass and carbon stock accounting, and the linear rescaling between
allometry variants.

Stocks are simple expansions: a mean density (Mg/ha) times a region area,
reported in million metric tons (Mt). The design-based estimator here is a
plain mean-times-area expansion, not a post-stratified estimator; outputs
that carry design-based numbers must say so.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .grid import Grid

LOGGER = logging.getLogger(__name__)

# fixed carbon fraction of aboveground biomass under the component-ratio method
CRM_CARBON_FRACTION = 0.5

DESIGN_ESTIMATOR_NOTE = (
    "design-based totals are simple expansions (mean plot density times region "
    "area) without post-stratification"
)


@dataclass(frozen=True)
class StockEstimate:
    quantity: str        # "AGB" or "AGC"
    method: str          # "model" or "design"
    allometry: str       # "CRM" or "NSVB"
    year: int
    total_mt: float      # million metric tons
    region_area_ha: float
    area_basis: str | None = None  # model stocks: "extent", "valid", or "given"


@dataclass(frozen=True)
class CarbonFractionRow:
    species_code: str
    fraction: float      # carbon fraction of aboveground biomass
    agb_share: float     # species share of total AGB
    year: int


def load_carbon_fractions(path) -> list[CarbonFractionRow]:
    required = {"species_code", "fraction", "agb_share", "year"}
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            missing = sorted(required - set(reader.fieldnames or []))
            raise ValueError(f"carbon fraction table {path} is missing columns: {missing}")
        for i, row in enumerate(reader, start=2):
            try:
                rows.append(CarbonFractionRow(
                    species_code=row["species_code"],
                    fraction=float(row["fraction"]),
                    agb_share=float(row["agb_share"]),
                    year=int(row["year"]),
                ))
            except (TypeError, ValueError, KeyError) as e:
                raise ValueError(f"malformed carbon fraction row at {path}:{i}: {e}") from e
    return rows


def weighted_carbon_fraction(rows) -> float:
    """AGB-share-weighted mean carbon fraction; shares must sum to one."""
    rows = list(rows)
    if not rows:
        raise ValueError("no carbon fraction rows")
    share_sum = sum(r.agb_share for r in rows)
    if abs(share_sum - 1.0) > 1e-9:
        raise ValueError(f"AGB shares sum to {share_sum!r}, not 1")
    for r in rows:
        if not 0.0 < r.fraction < 1.0:
            raise ValueError(f"carbon fraction {r.fraction!r} outside (0, 1)")
        if r.agb_share < 0.0:
            raise ValueError("negative AGB share")
    return sum(r.agb_share * r.fraction for r in rows)


def model_stock(agb_grid: Grid, year: int, allometry: str,
                area_basis: str = "extent",
                region_area_ha: float | None = None) -> StockEstimate:
    """Map-based stock: mean valid-cell density times the region area.

    area_basis "extent" uses the full grid footprint (masked cells count as
    area at the mean density); "valid" restricts the area to unmasked cells.
    An explicit region_area_ha overrides both.
    """
    vals = agb_grid.values[agb_grid.mask]
    if vals.size == 0:
        raise ValueError("no valid cells to estimate a stock from")
    mean_density = float(vals.astype(np.float64).mean())
    cell_ha = agb_grid.cell_area_ha()
    if region_area_ha is not None:
        area = float(region_area_ha)
        basis = "given"
    elif area_basis == "extent":
        area = agb_grid.ncols * agb_grid.nrows * cell_ha
        basis = "extent"
    elif area_basis == "valid":
        area = int(vals.size) * cell_ha
        basis = "valid"
    else:
        raise ValueError(f"unknown area basis {area_basis!r}")
    return StockEstimate(
        quantity="AGB", method="model", allometry=allometry, year=year,
        total_mt=mean_density * area / 1e6, region_area_ha=area, area_basis=basis,
    )


def design_stock(plots, region_area_ha: float, year: int, allometry: str) -> StockEstimate:
    """Plot-based stock: mean plot density times the region area."""
    densities = [p.agb(allometry) for p in plots]
    if not densities:
        raise ValueError("no plots to estimate a stock from")
    if not region_area_ha > 0:
        raise ValueError("region area must be positive")
    mean_density = float(np.mean(densities))
    return StockEstimate(
        quantity="AGB", method="design", allometry=allometry, year=year,
        total_mt=mean_density * region_area_ha / 1e6, region_area_ha=float(region_area_ha),
    )


def agb_to_agc(stock: StockEstimate, fraction: float) -> StockEstimate:
    """Convert a biomass stock to a carbon stock by a fraction in (0, 1)."""
    if stock.quantity != "AGB":
        raise ValueError(f"cannot convert quantity {stock.quantity!r} to carbon")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"carbon fraction {fraction!r} outside (0, 1)")
    return replace(stock, quantity="AGC", total_mt=stock.total_mt * fraction)


def stock_change(later: StockEstimate, earlier: StockEstimate) -> float:
    """Stock difference in Mt between two matching estimates (later - earlier)."""
    for attr in ("quantity", "method", "allometry"):
        if getattr(later, attr) != getattr(earlier, attr):
            raise ValueError(
                f"mismatched {attr}: {getattr(later, attr)!r} vs {getattr(earlier, attr)!r}")
    if later.year == earlier.year:
        raise ValueError("stock change needs two different years")
    return later.total_mt - earlier.total_mt


@dataclass
class RescaleFit:
    """Linear map from one allometry's predictions (plus elevation) to the
    other's, with held-out test error."""

    intercept: float
    coef_source: float
    coef_elevation: float
    n_train: int
    n_test: int
    test_rmse: float | None
    test_mae: float | None
    test_me: float | None
    test_r2: float | None


def rescale_fit(target_grid: Grid, source_grid: Grid, elevation_grid: Grid,
                n_sample: int = 1_000_000, train_frac: float = 0.8,
                seed=0) -> RescaleFit:
    """OLS fit target ~ intercept + source + elevation on sampled cells.

    Draws up to n_sample jointly valid cells without replacement (all of them
    when fewer exist), splits train/test by train_frac, and solves the normal
    equations with a pivoted factorization. A reciprocal condition number
    below 1e-10 on the normal matrix raises. train_frac=1 leaves the test
    metrics absent.
    """
    if not (target_grid.aligned_with(source_grid) and target_grid.aligned_with(elevation_grid)):
        raise ValueError("grids are not aligned")
    if not 0.0 < train_frac <= 1.0:
        raise ValueError("train_frac must be in (0, 1]")
    joint = target_grid.mask & source_grid.mask & elevation_grid.mask
    flat = np.nonzero(joint.ravel())[0]
    if flat.size < 3:
        raise ValueError("need at least 3 jointly valid cells")
    rng = np.random.default_rng(seed)
    if flat.size > n_sample:
        take = rng.choice(flat.size, size=n_sample, replace=False)
    else:
        take = rng.permutation(flat.size)
    chosen = flat[take]
    tgt = target_grid.values.ravel()[chosen].astype(np.float64)
    src = source_grid.values.ravel()[chosen].astype(np.float64)
    elev = elevation_grid.values.ravel()[chosen].astype(np.float64)
    n = chosen.size
    n_train = int(round(train_frac * n))
    n_train = min(max(n_train, 3), n)

    A = np.column_stack([np.ones(n), src, elev])
    At = A[:n_train]
    yt = tgt[:n_train]
    G = At.T @ At
    if 1.0 / np.linalg.cond(G) < 1e-10:
        raise ValueError("collinear rescale design (condition estimate too small)")
    beta = np.linalg.solve(G, At.T @ yt)

    n_test = n - n_train
    if n_test == 0:
        rmse = mae = me = r2 = None
    else:
        ys = tgt[n_train:]
        pred = A[n_train:] @ beta
        e = ys - pred
        rmse = float(np.sqrt(np.mean(e ** 2)))
        mae = float(np.mean(np.abs(e)))
        me = float(np.mean(e))
        ss_tot = float(np.sum((ys - ys.mean()) ** 2))
        r2 = None if ss_tot == 0.0 else float(1.0 - np.sum(e ** 2) / ss_tot)
    return RescaleFit(
        intercept=float(beta[0]),
        coef_source=float(beta[1]),
        coef_elevation=float(beta[2]),
        n_train=n_train,
        n_test=n_test,
        test_rmse=rmse,
        test_mae=mae,
        test_me=me,
        test_r2=r2,
    )
