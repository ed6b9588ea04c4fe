"""
Classification quality against the number of Hutchinson probes.

Every row classifies the same samples; probe streams are nested, so the n=5
row uses exactly the first five probes of the n=30 row. An exact-divergence
row is appended as the asymptote.
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from src.classification.classifier import classify
from src.evaluation.stats import binomial_stderr, mean_and_stderr
from src.likelihood.prob_flow import ProbeLaw, SolverCfg, TraceCfg, TraceMode

logger = logging.getLogger(__name__)

DEFAULT_PROBE_COUNTS = (1, 2, 5, 10, 30)
CONVERGENCE_CSV_FIELDS = [
    "n_probes",
    "accuracy",
    "accuracy_stderr",
    "mean_logp_true",
    "mean_logp_true_stderr",
    "mean_logp_best_wrong",
    "mean_logp_best_wrong_stderr",
    "n_samples",
    "n_failed",
]


def _row(label, predictions, logp_true, logp_wrong, n_failed) -> dict:
    n = len(predictions)
    accuracy = float(np.mean(predictions)) if n else float("nan")
    true_mean, true_se = mean_and_stderr(logp_true)
    wrong_mean, wrong_se = mean_and_stderr(logp_wrong)
    return {
        "n_probes": label,
        "accuracy": accuracy,
        "accuracy_stderr": binomial_stderr(accuracy, n),
        "mean_logp_true": true_mean,
        "mean_logp_true_stderr": true_se,
        "mean_logp_best_wrong": wrong_mean,
        "mean_logp_best_wrong_stderr": wrong_se,
        "n_samples": n,
        "n_failed": n_failed,
    }


def _evaluate(model, x, labels, cfg, tcfg, label) -> dict:
    correct, logp_true, logp_wrong = [], [], []
    n_failed = 0
    for i in range(len(labels)):
        res = classify(model, model.spec, x[i], cfg, tcfg, sample_id=i)
        y = int(labels[i])
        correct.append(res.predicted == y)
        if res.failed:
            n_failed += 1
            continue
        logp_true.append(res.logps[y])
        if res.logps.size > 1:
            logp_wrong.append(np.max(np.delete(res.logps, y)))
    print(f"  n_probes={label}: accuracy {np.mean(correct):.4f} ({n_failed} failed)")
    return _row(label, correct, logp_true, logp_wrong, n_failed)


def trace_convergence_experiment(
    model,
    dataset,
    n_grid: Sequence[int] = DEFAULT_PROBE_COUNTS,
    cfg: Optional[SolverCfg] = None,
    seed: int = 0,
    probe: ProbeLaw = ProbeLaw.RADEMACHER,
    limit: Optional[int] = None,
    dequant_seed: int = 0,
) -> List[dict]:
    """
    One row per probe count plus a final "exact" row.

    row example:
        {
            "n_probes": 10,
            "accuracy": 0.97,
            "accuracy_stderr": 0.012,
            "mean_logp_true": -2.91,
            "mean_logp_true_stderr": 0.05,
            "mean_logp_best_wrong": -9.4,
            "mean_logp_best_wrong_stderr": 0.3,
            "n_samples": 200,
            "n_failed": 0
        }
    """
    if len(dataset) == 0:
        raise ValueError("trace convergence needs a nonempty dataset")
    if any(n < 1 for n in n_grid):
        raise ValueError(f"probe counts must be >= 1, got {list(n_grid)}")
    if limit is not None and limit < 1:
        raise ValueError(f"limit must be >= 1 or None, got {limit}")
    cfg = cfg or SolverCfg()
    n = len(dataset) if limit is None else min(limit, len(dataset))
    x = dataset.continuous(dequant_seed)[:n]
    labels = dataset.labels[:n]

    rows = []
    n_rows = len(n_grid) + 1
    for k, n_probes in enumerate(sorted(n_grid)):
        print(f"[{k+1}/{n_rows}] Hutchinson with {n_probes} probe(s) on {n} samples")
        tcfg = TraceCfg(mode=TraceMode.HUTCHINSON, n_probes=n_probes, probe=probe, seed=seed)
        rows.append(_evaluate(model, x, labels, cfg, tcfg, n_probes))
    print(f"[{n_rows}/{n_rows}] exact divergence on {n} samples")
    rows.append(_evaluate(model, x, labels, cfg, TraceCfg(mode=TraceMode.EXACT, seed=seed), "exact"))
    return rows
