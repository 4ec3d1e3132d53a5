"""Regular flat-top hexagonal tessellations for multi-scale aggregation.

`spacing` is the distance between adjacent cell centroids; the circumradius is
spacing/sqrt(3) and the cell area is (sqrt(3)/2) * spacing^2. Cell ids are
(row, col) offset coordinates: columns step 1.5*R in x, rows step
sqrt(3)*R in y, odd columns shifted up half a row. The tessellation is the
Voronoi diagram of its centroids, so assignment is nearest-centroid with a
lexicographic (row, col) tie-break.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT3 = math.sqrt(3.0)


@dataclass
class HexGrid:
    spacing: float
    x0: float
    y0: float
    col_min: int
    col_max: int
    row_min: int
    row_max: int

    @property
    def circumradius(self) -> float:
        return self.spacing / SQRT3

    @property
    def cell_area(self) -> float:
        return (SQRT3 / 2.0) * self.spacing ** 2

    @property
    def n_cells(self) -> int:
        return (self.col_max - self.col_min + 1) * (self.row_max - self.row_min + 1)

    def center(self, row, col):
        """Centroid coordinates; row/col may be arrays."""
        r = self.circumradius
        col = np.asarray(col)
        row = np.asarray(row)
        x = self.x0 + col * (1.5 * r)
        y = self.y0 + row * (SQRT3 * r) + (col % 2) * (SQRT3 * r / 2.0)
        return x, y

    def cells(self):
        """All (id, center) pairs, id-sorted. id = (row, col)."""
        out = []
        for row in range(self.row_min, self.row_max + 1):
            for col in range(self.col_min, self.col_max + 1):
                x, y = self.center(row, col)
                out.append(((row, col), (float(x), float(y))))
        return out


@dataclass(frozen=True)
class HexAggregate:
    hex_id: tuple[int, int]
    n_members: int
    y_mean: float
    yhat_mean: float


def make_hexgrid(bbox: tuple[float, float, float, float], spacing: float) -> HexGrid:
    """Tessellation whose cells cover the bbox (xmin, ymin, xmax, ymax).

    The origin sits at the bbox lower-left corner and cell centers extend one
    circumradius beyond every edge, so every point inside the bbox has its
    nearest centroid in the grid.
    """
    xmin, ymin, xmax, ymax = bbox
    if not (xmax > xmin and ymax > ymin):
        raise ValueError("bbox must have positive extent")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    r = spacing / SQRT3
    # centers within one circumradius of the bbox; any point inside the bbox
    # is within r of some centroid, so this set holds every reachable cell
    width = xmax - xmin
    height = ymax - ymin
    col_min = int(math.ceil(-r / (1.5 * r)))
    col_max = int(math.floor((width + r) / (1.5 * r)))
    row_min = int(math.ceil((-r - SQRT3 * r / 2.0) / (SQRT3 * r)))
    row_max = int(math.floor((height + r) / (SQRT3 * r)))
    return HexGrid(spacing=spacing, x0=xmin, y0=ymin,
                   col_min=col_min, col_max=col_max,
                   row_min=row_min, row_max=row_max)


def assign(points: np.ndarray, hexgrid: HexGrid) -> np.ndarray:
    """Assign each point (n,2 array) to its cell; returns an (n,2) array of
    (row, col) ids.

    Equidistant points go to the lower (row, col). Points whose nearest
    centroid falls outside the tessellation raise.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array")
    x = pts[:, 0]
    y = pts[:, 1]
    r = hexgrid.circumradius
    n = x.size

    c_est = np.rint((x - hexgrid.x0) / (1.5 * r)).astype(np.int64)
    cand_d2 = np.empty((9, n), dtype=np.float64)
    cand_row = np.empty((9, n), dtype=np.int64)
    cand_col = np.empty((9, n), dtype=np.int64)
    k = 0
    for dc in (-1, 0, 1):
        col = c_est + dc
        off = (col % 2) * (SQRT3 * r / 2.0)
        r_est = np.rint((y - hexgrid.y0 - off) / (SQRT3 * r)).astype(np.int64)
        for dr in (-1, 0, 1):
            row = r_est + dr
            cx, cy = hexgrid.center(row, col)
            cand_d2[k] = (x - cx) ** 2 + (y - cy) ** 2
            cand_row[k] = row
            cand_col[k] = col
            k += 1

    dmin = cand_d2.min(axis=0)
    # among exact-distance ties, the lowest (row, col) wins
    span = hexgrid.col_max - hexgrid.col_min + 3
    order = (cand_row - (hexgrid.row_min - 1)) * span + (cand_col - (hexgrid.col_min - 1))
    order = np.where(cand_d2 == dmin, order, np.iinfo(np.int64).max)
    pick = order.argmin(axis=0)
    idx = np.arange(n)
    rows = cand_row[pick, idx]
    cols = cand_col[pick, idx]

    inside = ((rows >= hexgrid.row_min) & (rows <= hexgrid.row_max)
              & (cols >= hexgrid.col_min) & (cols <= hexgrid.col_max))
    if not np.all(inside):
        bad = int(np.nonzero(~inside)[0][0])
        raise ValueError(
            f"point ({x[bad]}, {y[bad]}) falls outside the tessellation")
    return np.stack([rows, cols], axis=1)


def aggregate_pairs(pairs, locations: np.ndarray, hexgrid: HexGrid) -> list[HexAggregate]:
    """Unweighted per-cell means of paired values.

    `pairs` needs `y` and `yhat` array attributes; `locations` is the matching
    (n, 2) coordinate array. Only cells with at least one member are returned,
    ordered by cell id.
    """
    y = np.asarray(pairs.y, dtype=np.float64)
    yhat = np.asarray(pairs.yhat, dtype=np.float64)
    locs = np.asarray(locations, dtype=np.float64)
    if locs.shape != (y.size, 2):
        raise ValueError("locations must be an (n, 2) array matching the pairs")
    ids = assign(locs, hexgrid)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (row, col) in enumerate(ids):
        groups.setdefault((int(row), int(col)), []).append(i)
    out = []
    for hex_id in sorted(groups):
        members = groups[hex_id]
        out.append(HexAggregate(
            hex_id=hex_id,
            n_members=len(members),
            y_mean=float(y[members].mean()),
            yhat_mean=float(yhat[members].mean()),
        ))
    return out
