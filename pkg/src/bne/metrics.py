"""Point, distributional and calibration metrics for predictive distributions."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from bne.inference import cvm_score
from bne.model import PredictiveDistribution
from bne.uncertainty import GridWarning, predictive_interval, predictive_mean

DECILES = tuple(np.round(np.arange(1, 10) / 10, 1))


class MetricError(ValueError):
    pass


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise MetricError("rmse needs at least one point")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def l1_cdf_distance(model_cdf, truth_cdf, locations, y_grid) -> float:
    """Sum over locations of the integrated absolute CDF difference on ``y_grid``.

    ``model_cdf`` and ``truth_cdf`` are callables ``(y_grid, x) -> values``
    or precomputed (Q, M) arrays.
    """
    y = np.asarray(y_grid, dtype=float)
    locations = np.asarray(locations, dtype=float)
    locations = locations.reshape(len(locations), -1)
    Q = locations.shape[0]
    grid = np.broadcast_to(y, (Q, y.shape[-1]))

    def values(F):
        if callable(F):
            return np.stack([np.asarray(F(grid[q], locations[q]), dtype=float).ravel() for q in range(Q)])
        return np.asarray(F, dtype=float).reshape(Q, -1)

    Fm, Ft = values(model_cdf), values(truth_cdf)
    for name, F in (("model", Fm), ("truth", Ft)):
        miss = (F[:, 0] > 1e-4) | (F[:, -1] < 1 - 1e-4)
        if miss.any():
            warnings.warn(f"{name} CDF is not covered by the grid at {int(miss.sum())} location(s)",
                          GridWarning, stacklevel=2)
    return float(np.sum(trapezoid(np.abs(Fm - Ft), grid, axis=-1)))


def coverage_from_intervals(lo, hi, y, levels=DECILES) -> tuple[float, np.ndarray]:
    """Coverage index from per-level interval endpoints, each (L, N).

    Returns the index and the empirical coverage per level.
    """
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise MetricError("coverage needs a non-empty dataset")
    lo, hi = np.atleast_2d(lo), np.atleast_2d(hi)
    levels = np.asarray(levels, dtype=float)
    if lo.shape != (levels.size, y.size) or hi.shape != lo.shape:
        raise MetricError(f"interval arrays must have shape {(levels.size, y.size)}")
    inside = (lo <= y[None]) & (y[None] <= hi)
    # a zero-width interval covers nothing
    inside &= hi > lo
    p_hat = inside.mean(axis=1)
    return float(np.sum(np.abs(p_hat - levels))), p_hat


def coverage_index(dist: PredictiveDistribution, y, levels=DECILES) -> tuple[float, np.ndarray]:
    """Coverage index of central predictive intervals on held-out responses ``y``."""
    levels = np.asarray(levels, dtype=float)
    if np.any((levels <= 0) | (levels >= 1)):
        raise MetricError("coverage levels must lie in (0, 1)")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridWarning)
        bounds = [predictive_interval(dist, q) for q in levels]
    lo = np.stack([b[0] for b in bounds])
    hi = np.stack([b[1] for b in bounds])
    return coverage_from_intervals(lo, hi, y, levels)


def cdf_at(dist: PredictiveDistribution, points) -> np.ndarray:
    """Draw-averaged CDF at ``points`` by linear interpolation (flat beyond the grid ends)."""
    F = dist.mean_cdf()
    pts = np.asarray(points, dtype=float)
    return np.stack([np.interp(pts, dist.y_grid[q], F[q], left=F[q, 0], right=F[q, -1])
                     for q in range(dist.n_locations)])


def heldout_cvm(dist: PredictiveDistribution, y, y_points) -> float:
    """CvM estimator of the predictive CDF against held-out responses."""
    return cvm_score(cdf_at(dist, y_points), y, y_points)


@dataclass
class MetricReport:
    rmse_empirical: float
    coverage_index: float
    cvm: float
    n: int
    seed: int
    rmse_vs_truth: float | None = None
    l1_vs_truth: float | None = None
    coverage: list = field(default_factory=list)
    model: str = ""

    def __post_init__(self):
        for name in ("rmse_empirical", "coverage_index", "cvm", "rmse_vs_truth", "l1_vs_truth"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise MetricError(f"{name} must be nonnegative, got {v}")
        if (self.rmse_vs_truth is None) != (self.l1_vs_truth is None):
            raise MetricError("truth-based metrics must be given together")

    def row(self) -> dict:
        d = asdict(self)
        d.pop("coverage")
        if self.rmse_vs_truth is None:
            d.pop("rmse_vs_truth")
            d.pop("l1_vs_truth")
        return d

    def write_csv(self, path) -> None:
        row = self.row()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in row.items()})

    def to_json(self) -> str:
        return json.dumps({**self.row(), "coverage": list(map(float, self.coverage))}, indent=2, sort_keys=True)


def evaluate_distribution(dist: PredictiveDistribution, test_y, *, seed: int = 0, truth=None, l1_grid=None,
                          l1_dist: PredictiveDistribution | None = None, cvm_points=None,
                          levels=DECILES, model: str = "") -> MetricReport:
    """Metrics of one predictive distribution at the test locations of ``dist``.

    ``truth`` (anything with ``true_mean(x)`` and ``true_cdf(y, x)``) enables
    the truth-based metrics; ``l1_dist`` holds the same model evaluated on
    the shared ``l1_grid``.  Means come from the model's own grid.
    """
    test_y = np.asarray(test_y, dtype=float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GridWarning)
        mean = predictive_mean(dist)
    ci, p_hat = coverage_index(dist, test_y, levels)
    if cvm_points is None:
        cvm_points = np.linspace(test_y.min(), test_y.max(), 20)
    rep = dict(
        rmse_empirical=rmse(mean, test_y), coverage_index=ci, cvm=heldout_cvm(dist, test_y, cvm_points),
        n=int(test_y.size), seed=int(seed), coverage=p_hat.tolist(), model=model)
    if truth is not None:
        if l1_dist is None or l1_grid is None:
            raise MetricError("truth-based metrics need the distribution on the shared L1 grid")
        x = dist.x
        Ft = np.stack([truth.true_cdf(l1_grid, x[q]) for q in range(x.shape[0])])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", GridWarning)
            l1 = l1_cdf_distance(l1_dist.mean_cdf(), Ft, x, l1_grid) / x.shape[0]
        rep.update(rmse_vs_truth=rmse(mean, truth.true_mean(x)), l1_vs_truth=l1)
    return MetricReport(**rep)
