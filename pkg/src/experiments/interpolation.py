"""
Log-likelihood along straight lines between data points.

For each pair (x_A, x_B) the curve f(t) = log p(t·x_A + (1 − t)·x_B) is
evaluated on a grid in [0, 1] with the marginal likelihood under a uniform
class prior. Curves are averaged across pairs (mean and standard deviation
per grid point) and summarized by the convexity score.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.classification.classifier import classify, marginal_from_logps
from src.diffusion.sde import SdeSpec
from src.evaluation.stats import bootstrap_ci, quartiles
from src.likelihood.prob_flow import SolverCfg, TraceCfg

logger = logging.getLogger(__name__)

DEFAULT_GRID_POINTS = 24
CURVE_CSV_FIELDS = ["t", "mean_logp", "std_logp", "n_pairs"]


@dataclass
class InterpCurve:
    t_grid: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_pairs: int

    def rows(self) -> List[dict]:
        return [
            {"t": float(t), "mean_logp": float(m), "std_logp": float(s), "n_pairs": self.n_pairs}
            for t, m, s in zip(self.t_grid, self.mean, self.std)
        ]


@dataclass
class ConvexityScore:
    fraction_nonnegative: float
    mean_second_difference: float


@dataclass
class InterpolationResult:
    curve: InterpCurve
    per_pair: np.ndarray                      # (n_pairs, G), nan where a solve failed
    failed_pairs: List[int] = field(default_factory=list)

    def summary(self) -> dict:
        score = convexity_score(self.curve)
        per_pair = [
            convexity_score(row, self.curve.t_grid).fraction_nonnegative
            for i, row in enumerate(self.per_pair) if i not in self.failed_pairs
        ]
        q1, med, q3, q4 = quartiles(per_pair)
        ci_lo, ci_hi = bootstrap_ci(per_pair)
        return {
            "n_pairs": int(self.per_pair.shape[0]),
            "n_failed_pairs": len(self.failed_pairs),
            "failed_pairs": list(self.failed_pairs),
            "convexity_fraction": score.fraction_nonnegative,
            "mean_second_difference": score.mean_second_difference,
            "per_pair_convexity_fraction": {"q1": q1, "median": med, "q3": q3, "max": q4, "ci95": [ci_lo, ci_hi]},
        }


def default_t_grid(n_points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_points)


def _check_grid(t_grid) -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size < 2:
        raise ValueError("t grid must be a vector with at least two points")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t grid must be strictly increasing")
    if t_grid[0] != 0.0 or t_grid[-1] != 1.0:
        raise ValueError(f"t grid must start at 0 and end at 1, got [{t_grid[0]}, {t_grid[-1]}]")
    return t_grid


def interpolation_experiment(
    model,
    spec: SdeSpec,
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    t_grid=None,
    cfg: Optional[SolverCfg] = None,
    tcfg: Optional[TraceCfg] = None,
) -> InterpolationResult:
    """
    Marginal log-likelihood curves between pairs of points.

    All points of pair i share the probe stream of sample id i. A pair with
    any failed solve is flagged and left out of the mean and std.
    """
    t_grid = _check_grid(default_t_grid() if t_grid is None else t_grid)
    cfg = cfg or SolverCfg()
    tcfg = tcfg or TraceCfg()
    n_pairs = len(pairs)
    per_pair = np.full((n_pairs, t_grid.size), np.nan)
    failed = []

    for i, (x_a, x_b) in enumerate(pairs):
        x_a = np.asarray(x_a, dtype=np.float64).reshape(-1)
        x_b = np.asarray(x_b, dtype=np.float64).reshape(-1)
        print(f"[{i+1}/{n_pairs}] interpolating pair {i}")
        for j, t in enumerate(t_grid):
            res = classify(model, spec, t * x_a + (1.0 - t) * x_b, cfg, tcfg, sample_id=i)
            if res.failed:
                continue
            per_pair[i, j] = marginal_from_logps(res.logps)
        if np.any(np.isnan(per_pair[i])):
            logger.warning(f"pair {i}: {int(np.isnan(per_pair[i]).sum())} grid point(s) failed")
            failed.append(i)

    ok = np.setdiff1d(np.arange(n_pairs), failed)
    if ok.size:
        mean = per_pair[ok].mean(axis=0)
        std = per_pair[ok].std(axis=0)
    else:
        mean = np.full(t_grid.size, np.nan)
        std = np.full(t_grid.size, np.nan)
    curve = InterpCurve(t_grid=t_grid, mean=mean, std=std, n_pairs=int(ok.size))
    return InterpolationResult(curve=curve, per_pair=per_pair, failed_pairs=failed)


def second_differences(values, t_grid) -> np.ndarray:
    """Divided second differences; on a uniform grid (f[i-1] − 2f[i] + f[i+1]) / h²."""
    f = np.asarray(values, dtype=np.float64)
    t = np.asarray(t_grid, dtype=np.float64)
    h0 = t[1:-1] - t[:-2]
    h1 = t[2:] - t[1:-1]
    return 2.0 * ((f[2:] - f[1:-1]) / h1 - (f[1:-1] - f[:-2]) / h0) / (h0 + h1)


def convexity_score(curve, t_grid=None) -> ConvexityScore:
    """
    Fraction of nonnegative second differences of a curve, and their mean.

    Accepts an InterpCurve or raw values (grid defaults to uniform on [0, 1]).
    Differences within round-off of zero count as nonnegative, so a linear
    curve scores 1.0.
    """
    if isinstance(curve, InterpCurve):
        values, t_grid = curve.mean, curve.t_grid
    else:
        values = np.asarray(curve, dtype=np.float64)
        t_grid = np.linspace(0.0, 1.0, values.size) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    if values.size < 3:
        raise ValueError(f"convexity score needs at least 3 grid points, got {values.size}")
    d2 = second_differences(values, t_grid)
    h_min = float(np.min(np.diff(t_grid)))
    tol = 1e-12 * max(1.0, float(np.max(np.abs(values)))) / h_min ** 2
    return ConvexityScore(
        fraction_nonnegative=float(np.mean(d2 >= -tol)),
        mean_second_difference=float(np.mean(d2)),
    )
