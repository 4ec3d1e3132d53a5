"""Area-weighted extraction of raster values under a four-subplot field plot.

The footprint is the union of four disjoint circles of radius 7.32 m: one at
the plot center and three at 36.6 m, at azimuths 120/240/360 degrees clockwise
from north. Overlap areas between the footprint and each raster cell are
computed by adaptive subdivision: cells (and sub-cells) wholly inside or
outside a circle are resolved exactly, and only the boundary band is refined,
down to a guaranteed error below 1e-4 of one subplot's area per circle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Grid
from .inventory import SUBPLOT_RADIUS_M, SUBPLOT_OFFSET_M, SUBPLOT_AZIMUTHS_DEG

SUBPLOT_AREA_M2 = math.pi * SUBPLOT_RADIUS_M ** 2
AREA_TOLERANCE = 1e-4  # relative to one subplot's area, per circle
_MAX_DEPTH = 30


@dataclass(frozen=True)
class PlotFootprint:
    x: float
    y: float

    def subplot_centers(self) -> list[tuple[float, float]]:
        """Subplot centers: plot center first, then the three offset subplots.

        Azimuth is measured clockwise from north, so an azimuth a maps to the
        offset (sin a, cos a) times the offset distance.
        """
        centers = [(self.x, self.y)]
        for az_deg in SUBPLOT_AZIMUTHS_DEG:
            az = math.radians(az_deg)
            centers.append((self.x + SUBPLOT_OFFSET_M * math.sin(az),
                            self.y + SUBPLOT_OFFSET_M * math.cos(az)))
        return centers


@dataclass
class OverlapWeights:
    """Per-cell overlap areas in m^2; cols/rows index into the source grid."""

    cols: np.ndarray
    rows: np.ndarray
    weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def pixel_overlap_weights(footprint: PlotFootprint, grid: Grid) -> OverlapWeights:
    """Overlap area between the footprint and every intersected grid cell.

    Cells outside the grid extent are dropped, so a footprint straddling the
    edge yields weights summing to less than the footprint area, and one
    entirely outside yields no entries. Cell validity is ignored here; masking
    belongs to extraction.
    """
    acc: dict[tuple[int, int], float] = {}
    for cx, cy in footprint.subplot_centers():
        _accumulate_circle(acc, grid, cx, cy, SUBPLOT_RADIUS_M)
    if not acc:
        return OverlapWeights(cols=np.empty(0, dtype=int),
                              rows=np.empty(0, dtype=int),
                              weights=np.empty(0, dtype=float))
    keys = sorted(acc)
    cols = np.array([k[0] for k in keys], dtype=int)
    rows = np.array([k[1] for k in keys], dtype=int)
    weights = np.array([acc[k] for k in keys], dtype=float)
    return OverlapWeights(cols=cols, rows=rows, weights=weights)


def _accumulate_circle(acc, grid: Grid, cx: float, cy: float, r: float) -> None:
    """Add this circle's overlap area with each in-bounds cell into `acc`."""
    cs = grid.cellsize
    col_lo = max(0, int(math.floor((cx - r - grid.x_origin) / cs)))
    col_hi = min(grid.ncols - 1, int(math.floor((cx + r - grid.x_origin) / cs)))
    row_top = max(0, int(math.floor((grid.y_max - (cy + r)) / cs)))
    row_bot = min(grid.nrows - 1, int(math.floor((grid.y_max - (cy - r)) / cs)))
    if col_lo > col_hi or row_top > row_bot:
        return

    cols = np.arange(col_lo, col_hi + 1)
    rows = np.arange(row_top, row_bot + 1)
    cgrid, rgrid = np.meshgrid(cols, rows)
    cgrid = cgrid.ravel()
    rgrid = rgrid.ravel()
    nwin = cgrid.size
    # cell lower-left corners relative to the circle center; row 0 is the
    # north row
    u = grid.x_origin + cgrid * cs - cx
    v = grid.y_max - (rgrid + 1) * cs - cy
    pix = np.arange(nwin, dtype=np.int32)  # window-local index
    s = float(cs)  # every square at a given depth has the same side

    tol = AREA_TOLERANCE * SUBPLOT_AREA_M2
    r2 = r * r
    area = np.zeros(nwin, dtype=float)

    for _depth in range(_MAX_DEPTH + 1):
        # axis distance from the center to the square's midline; nearest point
        # is that minus the half-side (clamped), farthest corner is that plus
        h = s / 2.0
        ax = np.abs(u + h)
        ay = np.abs(v + h)
        fx = ax + h
        fy = ay + h
        ins = fx * fx + fy * fy <= r2
        if ins.any():
            area += np.bincount(pix[ins], minlength=nwin) * (s * s)
        nx = np.maximum(ax - h, 0.0)
        ny = np.maximum(ay - h, 0.0)
        unc = (nx * nx + ny * ny < r2) & ~ins
        u, v, pix = u[unc], v[unc], pix[unc]
        if u.size == 0:
            break
        # attribute half of the remaining uncertain band once it is thin
        # enough; worst-case error is then half the band area <= tol
        if u.size * (s * s) / 2.0 <= tol or _depth == _MAX_DEPTH:
            area += np.bincount(pix, minlength=nwin) * (s * s / 2.0)
            break
        s = h
        uh = u + s
        vh = v + s
        u = np.concatenate([u, uh, u, uh])
        v = np.concatenate([v, v, vh, vh])
        pix = np.tile(pix, 4)

    for i in np.nonzero(area > 0.0)[0]:
        key = (int(cgrid[i]), int(rgrid[i]))
        acc[key] = acc.get(key, 0.0) + float(area[i])


def weighted_mean(grid: Grid, weights: OverlapWeights) -> float | None:
    """Weighted mean of valid cell values under precomputed overlap weights.

    The weights must have been computed against a grid sharing this grid's
    geometry; only the values and mask may differ. Returns None when no valid
    cell carries weight.
    """
    if weights.weights.size == 0:
        return None
    valid = grid.mask[weights.rows, weights.cols]
    if not np.any(valid):
        return None
    wv = weights.weights[valid]
    vals = grid.values[weights.rows[valid], weights.cols[valid]].astype(np.float64)
    return float(np.sum(wv * vals) / np.sum(wv))


def extract_weighted_mean(grid: Grid, footprint: PlotFootprint) -> float | None:
    """Area-weighted mean of valid cell values under the footprint.

    Returns None when no valid cell carries weight (footprint outside the grid
    or fully over masked cells).
    """
    return weighted_mean(grid, pixel_overlap_weights(footprint, grid))
