"""Map accuracy and agreement statistics for paired reference/prediction data.

Error conventions: the residual is reference minus prediction (positive mean
error means underprediction). Percent metrics rescale by the mean of the
model-training reference values so they stay comparable across aggregation
scales. R-squared is computed against the reference mean of the compared
sample and may be negative; no clamping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .hexgrid import aggregate_pairs, make_hexgrid

DEFAULT_SCALES_KM = (1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0)


@dataclass
class PairedSample:
    """Reference values y and predictions yhat, matched by id."""

    ids: np.ndarray
    y: np.ndarray
    yhat: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.yhat = np.asarray(self.yhat, dtype=np.float64)
        if self.y.ndim != 1 or self.y.shape != self.yhat.shape or self.ids.shape != self.y.shape:
            raise ValueError("ids, y and yhat must be 1-d arrays of equal length")
        if self.y.size == 0:
            raise ValueError("a paired sample cannot be empty")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.yhat))):
            raise ValueError("paired values must be finite")

    @property
    def n(self) -> int:
        return int(self.y.size)


@dataclass
class MetricsReport:
    """One assessment row; metric fields are None where undefined (for
    example a scale with a single occupied cell)."""

    n: int
    rmse: float | None
    mae: float | None
    me: float | None
    pct_rmse: float | None
    pct_mae: float | None
    r2: float | None
    dr: float | None = None
    pph: float | None = None
    scale_km: float | None = None


@dataclass
class GmfrFit:
    """Geometric mean functional relationship y' = a + b*yhat.

    The symmetric line: slope magnitude sqrt(var(y)/var(yhat)), signed by the
    correlation, intercept through the means. `y_fit` are fitted values on the
    line given yhat; `yhat_fit` are the inverse fitted values given y.
    """

    a: float
    b: float
    y_fit: np.ndarray
    yhat_fit: np.ndarray


@dataclass
class AcDecomposition:
    ac: float
    ac_systematic: float
    ac_unsystematic: float
    ssd: float
    spd_u: float
    d: float


def basic_metrics(pairs: PairedSample, ybar_train: float) -> MetricsReport:
    """RMSE, MAE, ME, R2 and percent variants against a fixed normalizer.

    pct_rmse = 100*RMSE/ybar_train and likewise for MAE; ybar_train must be
    positive. R2 is None when the reference has no variance.
    """
    if not ybar_train > 0:
        raise ValueError("ybar_train must be positive for percent metrics")
    e = pairs.y - pairs.yhat
    n = pairs.n
    rmse = float(np.sqrt(np.mean(e ** 2)))
    mae = float(np.mean(np.abs(e)))
    me = float(np.mean(e))
    ss_tot = float(np.sum((pairs.y - pairs.y.mean()) ** 2))
    if n < 2 or ss_tot == 0.0:
        r2 = None
    else:
        r2 = float(1.0 - np.sum(e ** 2) / ss_tot)
    return MetricsReport(
        n=n,
        rmse=rmse,
        mae=mae,
        me=me,
        pct_rmse=100.0 * rmse / ybar_train,
        pct_mae=100.0 * mae / ybar_train,
        r2=r2,
    )


def willmott_dr(pairs: PairedSample, c: float = 2.0) -> float | None:
    """Refined index of agreement in [-1, 1]; None for a constant reference.

    With A = sum|yhat - y| and B = c * sum|y - ybar|:
    dr = 1 - A/B when A <= B, else B/A - 1.
    """
    a = float(np.sum(np.abs(pairs.yhat - pairs.y)))
    spread = float(np.sum(np.abs(pairs.y - pairs.y.mean())))
    if spread == 0.0:
        return None
    b = c * spread
    if a <= b:
        return 1.0 - a / b
    return b / a - 1.0


def gmfr_fit(pairs: PairedSample) -> GmfrFit:
    """Fit the symmetric functional line; both variables need variance."""
    y = pairs.y
    yhat = pairs.yhat
    ybar = y.mean()
    yhbar = yhat.mean()
    ss_y = float(np.sum((y - ybar) ** 2))
    ss_yh = float(np.sum((yhat - yhbar) ** 2))
    if ss_y == 0.0 or ss_yh == 0.0:
        raise ValueError("functional-line fit needs variance in both variables")
    cov = float(np.sum((y - ybar) * (yhat - yhbar)))
    sign = -1.0 if cov < 0 else 1.0
    b = sign * float(np.sqrt(ss_y / ss_yh))
    a = float(ybar - b * yhbar)
    y_fit = a + b * yhat
    yhat_fit = -a / b + y / b
    return GmfrFit(a=a, b=b, y_fit=y_fit, yhat_fit=yhat_fit)


def ac_decompose(pairs: PairedSample) -> AcDecomposition:
    """Agreement coefficient and its systematic/unsystematic split.

    AC = 1 - SSD/D with SSD the sum of squared differences and D the sum of
    potential-difference terms. The unsystematic sum SPDu measures scatter
    around the symmetric functional line; ACs = 1 - (SSD - SPDu)/D and
    ACu = 1 - SPDu/D, so ACs + ACu - 1 = AC exactly.
    """
    y = pairs.y
    yhat = pairs.yhat
    ybar = y.mean()
    yhbar = yhat.mean()
    m = abs(yhbar - ybar)
    d = float(np.sum((m + np.abs(yhat - yhbar)) * (m + np.abs(y - ybar))))
    if d == 0.0:
        raise ValueError("degenerate agreement denominator: all values equal")
    ssd = float(np.sum((yhat - y) ** 2))
    fit = gmfr_fit(pairs)
    spd_u = float(np.sum(np.abs(yhat - fit.yhat_fit) * np.abs(y - fit.y_fit)))
    return AcDecomposition(
        ac=1.0 - ssd / d,
        ac_systematic=1.0 - (ssd - spd_u) / d,
        ac_unsystematic=1.0 - spd_u / d,
        ssd=ssd,
        spd_u=spd_u,
        d=d,
    )


@dataclass
class Ecdf:
    """Right-continuous empirical distribution: F(q) = fraction of values <= q."""

    xs: np.ndarray
    fs: np.ndarray
    n: int

    def __call__(self, q):
        q = np.asarray(q, dtype=np.float64)
        idx = np.searchsorted(self.xs, q, side="right")
        out = np.where(idx > 0, self.fs[np.maximum(idx - 1, 0)], 0.0)
        return float(out) if out.ndim == 0 else out


def ecdf(values) -> Ecdf:
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.size == 0:
        raise ValueError("empirical distribution of an empty sample")
    if not np.all(np.isfinite(vals)):
        raise ValueError("values must be finite")
    xs, counts = np.unique(vals, return_counts=True)
    fs = np.cumsum(counts) / vals.size
    return Ecdf(xs=xs, fs=fs, n=int(vals.size))


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance: sup |F_a - F_b|.

    For right-continuous step functions the supremum is attained at a pooled
    sample point, so it is evaluated there exactly.
    """
    fa = ecdf(a)
    fb = ecdf(b)
    pooled = np.union1d(fa.xs, fb.xs)
    return float(np.max(np.abs(fa(pooled) - fb(pooled))))


def multiscale_assessment(pairs: PairedSample, locations, spacings_km=DEFAULT_SCALES_KM,
                          ybar_train: float = None) -> list[MetricsReport]:
    """Accuracy metrics across hexagonal aggregation scales.

    The 1 km entry is the plot-to-pixel comparison (no aggregation). Larger
    scales compare unweighted hexagon means of reference and prediction;
    plots-per-hexagon (pph) is the sample count over the occupied-cell count.
    A scale with fewer than two occupied cells reports its n with all metrics
    absent.
    """
    if ybar_train is None:
        raise ValueError("ybar_train is required")
    locs = np.asarray(locations, dtype=np.float64)
    if locs.shape != (pairs.n, 2):
        raise ValueError("locations must be an (n, 2) array matching the pairs")
    out = []
    for s_km in spacings_km:
        if s_km == 1:
            rep = basic_metrics(pairs, ybar_train)
            rep = replace(rep, dr=willmott_dr(pairs), scale_km=float(s_km))
            out.append(rep)
            continue
        spacing_m = float(s_km) * 1000.0
        xmin, ymin = locs.min(axis=0)
        xmax, ymax = locs.max(axis=0)
        if xmax == xmin:
            xmin, xmax = xmin - spacing_m / 2, xmax + spacing_m / 2
        if ymax == ymin:
            ymin, ymax = ymin - spacing_m / 2, ymax + spacing_m / 2
        hg = make_hexgrid((xmin, ymin, xmax, ymax), spacing_m)
        aggs = aggregate_pairs(pairs, locs, hg)
        n_hex = len(aggs)
        if n_hex < 2:
            out.append(MetricsReport(
                n=n_hex, rmse=None, mae=None, me=None, pct_rmse=None,
                pct_mae=None, r2=None, dr=None,
                pph=pairs.n / n_hex if n_hex else None, scale_km=float(s_km)))
            continue
        hex_pairs = PairedSample(
            ids=np.array([str(a.hex_id) for a in aggs]),
            y=np.array([a.y_mean for a in aggs]),
            yhat=np.array([a.yhat_mean for a in aggs]),
        )
        rep = basic_metrics(hex_pairs, ybar_train)
        rep = replace(rep, dr=willmott_dr(hex_pairs),
                      pph=pairs.n / n_hex, scale_km=float(s_km))
        out.append(rep)
    return out
