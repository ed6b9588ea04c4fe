import math

import numpy as np


def binomial_stderr(p: float, n: int) -> float:
    """Standard error of an accuracy p measured on n samples."""
    if n <= 0:
        return math.nan
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def mean_and_stderr(xs):
    xs = np.asarray(xs, dtype=np.float64)
    xs = xs[np.isfinite(xs)]
    if xs.size == 0:
        return math.nan, math.nan
    if xs.size == 1:
        return float(xs[0]), math.nan
    return float(xs.mean()), float(xs.std(ddof=1) / math.sqrt(xs.size))


def bootstrap_ci(data, n_boot=1000, ci=95, seed=0):
    """Percentile bootstrap interval of the mean (seeded, so reports stay reproducible)."""
    data = np.asarray(data, dtype=np.float64)
    if data.size == 0:
        return math.nan, math.nan
    rng = np.random.default_rng(seed)
    means = rng.choice(data, size=(n_boot, data.size), replace=True).mean(axis=1)
    lower = np.percentile(means, (100 - ci) / 2)
    upper = np.percentile(means, 100 - (100 - ci) / 2)
    return float(lower), float(upper)


def quartiles(xs):
    if len(xs) == 0:
        return (math.nan, math.nan, math.nan, math.nan)
    q1, med, q3 = np.percentile(np.asarray(xs, dtype=np.float64), [25, 50, 75])
    return float(q1), float(med), float(q3), float(np.max(xs))
