"""Band selection as 1-D robust outlier detection on attention heatmaps.

The heatmap scores are treated as ``b`` univariate samples.  An exact
minimum-covariance-determinant fit gives a robust location/scale; bands on
the high side whose robust Mahalanobis distance exceeds the chi-square(1)
cutoff for contamination ``lambda`` are selected.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)


@dataclass
class Heatmap:
    scores: np.ndarray
    provenance: tuple = ()

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size == 0:
            raise ValueError("heatmap scores must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("heatmap scores must be finite and non-negative")
        if abs(self.scores.sum() - 1.0) > 1e-6:
            raise ValueError(f"heatmap scores sum to {self.scores.sum():.8f}, expected 1")
        self.provenance = tuple(self.provenance)

    @classmethod
    def from_scores(cls, scores, provenance=()):
        """Build a heatmap from any non-negative scores, normalising them."""
        s = np.asarray(scores, dtype=np.float64)
        total = s.sum()
        if not total > 0:
            raise ValueError("heatmap scores must have a positive sum")
        return cls(s / total, provenance)

    @property
    def b(self):
        return self.scores.size


def aggregate_heatmaps(heatmaps):
    """Uniform element-wise mean of equal-length heatmaps, renormalised."""
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise ValueError("no heatmaps to aggregate")
    sizes = sorted({h.b for h in heatmaps})
    if len(sizes) > 1:
        raise ValueError(f"heatmaps have different band counts: {sizes}")
    mean = np.mean([h.scores for h in heatmaps], axis=0)
    prov = []
    for h in heatmaps:
        prov += [p for p in h.provenance if p not in prov]
    return Heatmap(mean / mean.sum(), tuple(prov))


# ------------------------------------------------------------- chi-square


# Acklam's rational approximation to the standard normal quantile
# (relative error below 1.2e-9 over the open unit interval).
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1))
    if p > 1 - _P_LOW:
        return -normal_quantile(1 - p)
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1))


def chi2_quantile_1dof(p: float) -> float:
    """Inverse CDF of the chi-square distribution with one degree of freedom."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    return normal_quantile((1.0 + p) / 2.0) ** 2


# ------------------------------------------------------------------- MCD


@dataclass
class McdFit:
    mu: float
    sigma2: float
    h: int
    support: np.ndarray
    raw_var: float
    degenerate: bool = False


def default_support_size(n: int) -> int:
    return (n + 2) // 2


def mcd_1d(x, h=None) -> McdFit:
    """Exact univariate minimum covariance determinant estimate.

    In one dimension the optimal ``h``-subset is a run of ``h`` consecutive
    order statistics, so every window of the sorted data is scored and the
    one with the smallest sample variance wins (lowest start on ties).  The
    raw variance is rescaled by ``median(d^2) / chi2_{1,0.5}`` for
    consistency at the Gaussian.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise ValueError("mcd_1d needs at least 2 observations")
    if h is None:
        h = default_support_size(n)
    if not 2 <= h <= n:
        raise ValueError(f"support size h={h} outside [2, {n}]")
    order = np.argsort(x, kind="stable")
    xs = x[order]
    variances = sliding_window_view(xs, h).var(axis=1, ddof=1)
    start = int(np.argmin(variances))
    window = xs[start:start + h]
    mu = float(window.mean())
    raw_var = float(variances[start])
    support = np.sort(order[start:start + h])
    if raw_var <= 0:
        return McdFit(mu, 0.0, h, support, 0.0, degenerate=True)
    d2 = (x - mu) ** 2 / raw_var
    sigma2 = raw_var * float(np.median(d2)) / chi2_quantile_1dof(0.5)
    return McdFit(mu, sigma2, h, support, raw_var, degenerate=not sigma2 > 0)


def mahalanobis(x, fit: McdFit):
    """Robust 1-D Mahalanobis distance ``|x - mu| / sqrt(sigma2)``."""
    if fit.degenerate or fit.sigma2 <= 0:
        raise ValueError("Mahalanobis distance undefined for a degenerate fit")
    return np.sqrt((np.asarray(x, dtype=np.float64) - fit.mu) ** 2 / fit.sigma2)


# -------------------------------------------------------------- selection


@dataclass
class BandSelection:
    selected: np.ndarray
    lam: float
    distances: np.ndarray
    threshold: float
    mu: float
    sigma2: float
    degenerate: bool = False
    provenance: tuple = field(default_factory=tuple)

    @property
    def status(self):
        return "degenerate" if self.degenerate else "ok"

    def to_report(self):
        return {
            "lambda": self.lam,
            "threshold": self.threshold,
            "mu": self.mu,
            "sigma2": self.sigma2,
            "status": self.status,
            "num_selected": int(self.selected.size),
            "selected": [int(i) for i in self.selected],
            "distances": [None if not math.isfinite(d) else float(d) for d in self.distances],
            "provenance": list(self.provenance),
        }


def select_bands(heatmap: Heatmap, lam: float) -> BandSelection:
    """Flag bands with anomalously high attention for contamination ``lam``."""
    if not 0.0 < lam < 0.5:
        raise ValueError(f"contamination rate must lie in (0, 0.5), got {lam}")
    scores = heatmap.scores
    fit = mcd_1d(scores, default_support_size(scores.size))
    threshold = math.sqrt(chi2_quantile_1dof(1.0 - lam))
    if fit.degenerate:
        log.warning("heatmap has a constant core (degenerate MCD fit); no bands selected")
        return BandSelection(np.array([], dtype=int), lam, np.full(scores.size, np.nan),
                             threshold, fit.mu, fit.sigma2, True, heatmap.provenance)
    dist = mahalanobis(scores, fit)
    selected = np.flatnonzero((dist > threshold) & (scores > fit.mu))
    return BandSelection(selected, lam, dist, threshold, fit.mu, fit.sigma2, False,
                         heatmap.provenance)


# -------------------------------------------------------------------- I/O


def write_heatmap_csv(path, heatmap: Heatmap):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["band", "score"])
        for i, s in enumerate(heatmap.scores):
            w.writerow([i, repr(float(s))])


def read_heatmap_csv(path) -> Heatmap:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"band", "score"}:
        raise ValueError(f"{path}: expected a 'band,score' CSV")
    bands = [int(r["band"]) for r in rows]
    if bands != list(range(len(bands))):
        raise ValueError(f"{path}: bands must be listed 0..b-1 in order")
    scores = np.array([float(r["score"]) for r in rows])
    if abs(scores.sum() - 1.0) <= 1e-6:
        return Heatmap(scores, (str(path),))  # already normalised: keep bit-exact
    return Heatmap.from_scores(scores, (str(path),))


def write_selection_report(path, selection: BandSelection):
    Path(path).write_text(json.dumps(selection.to_report(), indent=2) + "\n")


def read_selected_indices(path):
    """Band indices from a selection report (JSON) or a plain index list."""
    text = Path(path).read_text().strip()
    if text.startswith("{"):
        return [int(i) for i in json.loads(text)["selected"]]
    return [int(tok) for tok in text.replace(",", " ").split()]
