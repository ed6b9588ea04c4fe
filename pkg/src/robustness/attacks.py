"""
Gradient-based attacks on the likelihood classifier.

Gradients of log p(x | y) with respect to x are taken through a fixed-grid
RK4 discretization of the augmented probability-flow ODE. Since the
divergence term is itself a derivative of the score, this is a second-order
computation (the backward pass runs through the divergence VJPs).

PGD ascends the cross-entropy of softmax over the K class log-likelihoods:

    loss(x) = −log softmax(log p(x | ·))[y_true]
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from src.autodiff.diffengine import DTYPE, as_tensor
from src.classification.classifier import classify
from src.diffusion.sde import SdeSpec
from src.evaluation.stats import binomial_stderr
from src.likelihood.prob_flow import (
    SolverCfg,
    SolverError,
    TraceCfg,
    TraceMode,
    fixed_grid_log_likelihood,
)

logger = logging.getLogger(__name__)

# above this dimension the exact trace is too costly for the second-order path
EXACT_DIVERGENCE_MAX_DIM = 16
# tolerance for the per-step budget and domain assertions
BALL_TOL = 1e-12


class AttackAbortedError(RuntimeError):
    pass


class AttackNorm(str, Enum):
    LINF = "linf"
    L2 = "l2"


class AttackCfg(BaseModel):
    """
    PGD configuration. eps and step_size are in data units; step_size=None
    resolves to eps/4. eps=0 is the empty ball and returns the clean input.
    """

    model_config = ConfigDict(frozen=True)

    norm: AttackNorm = AttackNorm.LINF
    eps: float = Field(default=8.0 / 255.0, ge=0)
    step_size: Optional[float] = Field(default=None, gt=0)
    n_steps: int = Field(default=40, ge=1)
    random_start: bool = False
    seed: int = Field(default=0, ge=0)

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.eps / 4.0


def default_attack_cfg(norm, data_range: float = 1.0, **overrides) -> AttackCfg:
    """ℓ∞: eps = 8/255 of the data range; ℓ2: eps = 0.5. Step eps/4, 40 steps, no random start."""
    norm = AttackNorm(norm)
    eps = 8.0 / 255.0 * data_range if norm == AttackNorm.LINF else 0.5
    return AttackCfg(norm=norm, eps=eps, **overrides)


def _check_trace_cfg(dim: int, tcfg: Optional[TraceCfg]):
    exact = tcfg is None or tcfg.mode == TraceMode.EXACT
    if exact and dim > EXACT_DIVERGENCE_MAX_DIM:
        raise ValueError(
            f"exact divergence is limited to D <= {EXACT_DIVERGENCE_MAX_DIM} here; "
            f"pass a Hutchinson TraceCfg for D={dim}"
        )


def class_logps_fixed_grid(
    model,
    spec: SdeSpec,
    x,
    fixed_steps: int = 64,
    tcfg: Optional[TraceCfg] = None,
    sample_id: int = 0,
) -> torch.Tensor:
    """(K,) tensor of fixed-grid conditional log-likelihoods; differentiable if x requires grad."""
    x = as_tensor(x)
    _check_trace_cfg(x.shape[-1], tcfg)
    return torch.stack([
        fixed_grid_log_likelihood(model, spec, x, y, fixed_steps, tcfg, sample_id)
        for y in range(model.num_classes)
    ])


def attack_loss(logps: torch.Tensor, y_true: int) -> torch.Tensor:
    """Cross-entropy of the softmax over class log-likelihoods."""
    return -(logps[y_true] - torch.logsumexp(logps, dim=0))


def loglik_grad(
    model,
    spec: SdeSpec,
    x,
    y: Optional[int],
    fixed_steps: int = 64,
    tcfg: Optional[TraceCfg] = None,
    sample_id: int = 0,
) -> np.ndarray:
    """
    ∇ₓ log p(x | y) through the fixed RK4 grid.

    Exact divergence for D <= 16; above that a Hutchinson TraceCfg is required
    and its probes stay frozen.

    Raises:
        ValueError: fixed_steps < 8, or D too large without probes
        SolverError: non-finite gradient
    """
    x = as_tensor(x).detach().reshape(-1).clone().requires_grad_(True)
    _check_trace_cfg(x.shape[0], tcfg)
    with torch.enable_grad():
        logp = fixed_grid_log_likelihood(model, spec, x, y, fixed_steps, tcfg, sample_id)
        (g,) = torch.autograd.grad(logp, x)
    if not bool(torch.all(torch.isfinite(g))):
        raise SolverError(f"non-finite likelihood gradient (sample {sample_id}, label {y})", sample_id, y)
    return g.detach().numpy()


def project_ball(x, x0, norm, eps: float) -> np.ndarray:
    """Project x onto the ℓ∞ or ℓ2 ball of radius eps around x0."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    norm = AttackNorm(norm)
    if norm == AttackNorm.LINF:
        return np.clip(x, x0 - eps, x0 + eps)
    delta = x - x0
    dist = float(np.linalg.norm(delta))
    if dist <= eps:
        return x
    return x0 + delta * (eps / dist)


def ascent_direction(g, norm) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if AttackNorm(norm) == AttackNorm.LINF:
        return np.sign(g)
    g_norm = float(np.linalg.norm(g))
    return g / g_norm if g_norm > 0 else np.zeros_like(g)


def _random_start(x0: np.ndarray, acfg: AttackCfg, sample_id: int) -> np.ndarray:
    rng = np.random.default_rng([acfg.seed, sample_id])
    if acfg.norm == AttackNorm.LINF:
        return x0 + rng.uniform(-acfg.eps, acfg.eps, size=x0.shape)
    direction = rng.standard_normal(x0.shape)
    direction /= np.linalg.norm(direction)
    return x0 + direction * acfg.eps * rng.random() ** (1.0 / x0.size)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: bool
    trace: List[dict] = field(default_factory=list)
    y_pred_clean: Optional[int] = None
    y_pred_adv: Optional[int] = None
    final_loss: Optional[float] = None
    aborted: bool = False
    abort_reason: Optional[str] = None

    def record(self, sample_id: int, y_true: int, x0, acfg: AttackCfg) -> dict:
        delta = self.x_adv - np.asarray(x0, dtype=np.float64)
        return {
            "sample_id": int(sample_id),
            "y_true": int(y_true),
            "y_pred_clean": self.y_pred_clean,
            "y_pred_adv": self.y_pred_adv,
            "norm": acfg.norm.value,
            "eps": acfg.eps,
            "steps": len(self.trace),
            "final_loss": self.final_loss,
            "linf_dist": float(np.max(np.abs(delta))) if delta.size else 0.0,
            "l2_dist": float(np.linalg.norm(delta)),
            "success": self.success,
            "aborted": self.aborted,
        }


class _AttackObjective:
    """Deterministic CE loss and gradient at x (probes frozen by sample_id)."""

    def __init__(self, model, spec, y_true, fixed_steps, tcfg, sample_id):
        self.model = model
        self.spec = spec
        self.y_true = y_true
        self.fixed_steps = fixed_steps
        self.tcfg = tcfg
        self.sample_id = sample_id

    def loss(self, x: np.ndarray) -> float:
        logps = class_logps_fixed_grid(self.model, self.spec, x, self.fixed_steps, self.tcfg, self.sample_id)
        return attack_loss(logps, self.y_true).item()

    def loss_and_grad(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        xt = torch.as_tensor(x, dtype=DTYPE).clone().requires_grad_(True)
        try:
            with torch.enable_grad():
                logps = class_logps_fixed_grid(
                    self.model, self.spec, xt, self.fixed_steps, self.tcfg, self.sample_id
                )
                loss = attack_loss(logps, self.y_true)
                (g,) = torch.autograd.grad(loss, xt)
        except SolverError as e:
            raise AttackAbortedError(str(e)) from e
        g = g.detach().numpy()
        if not (math.isfinite(loss.item()) and np.all(np.isfinite(g))):
            raise AttackAbortedError("non-finite attack loss or gradient")
        return loss.item(), g


def _safe_loss(objective: _AttackObjective, x) -> Optional[float]:
    try:
        return objective.loss(x)
    except SolverError:
        return None


def _check_iterate(x, x0, acfg: AttackCfg, domain, step: int):
    delta = x - x0
    if acfg.norm == AttackNorm.LINF:
        dist = float(np.max(np.abs(delta))) if delta.size else 0.0
    else:
        dist = float(np.linalg.norm(delta))
    lo, hi = domain
    if dist > acfg.eps + BALL_TOL or x.min() < lo - BALL_TOL or x.max() > hi + BALL_TOL:
        raise AssertionError(f"PGD iterate left the budget ball or data domain at step {step}")


def pgd_attack(
    model,
    spec: SdeSpec,
    x0,
    y_true: int,
    acfg: AttackCfg,
    fixed_steps: int = 64,
    domain: Tuple[float, float] = (0.0, 1.0),
    solver_cfg: Optional[SolverCfg] = None,
    tcfg: Optional[TraceCfg] = None,
    sample_id: int = 0,
) -> AttackResult:
    """
    Projected gradient ascent on the cross-entropy, then an adaptive classify
    of the result.

    Args:
        tcfg: divergence configuration for both the attack gradients and the
              final classification (None: exact)
        domain: data range every iterate is clipped to

    Returns:
        AttackResult; success means the adversarial input is not classified
        as y_true (a withheld prediction counts as a success). On a gradient
        failure the attack stops, aborted=True, and the partial trace is kept.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    lo, hi = domain
    if x0.min() < lo or x0.max() > hi:
        raise ValueError(f"x0 lies outside the data domain {domain}")
    if not 0 <= y_true < model.num_classes:
        raise ValueError(f"y_true={y_true} out of range for K={model.num_classes}")
    solver_cfg = solver_cfg or SolverCfg()
    classify_tcfg = tcfg or TraceCfg(mode=TraceMode.EXACT)

    clean = classify(model, spec, x0, solver_cfg, classify_tcfg, sample_id=sample_id)
    objective = _AttackObjective(model, spec, y_true, fixed_steps, tcfg, sample_id)

    if acfg.eps == 0.0:
        return AttackResult(
            x_adv=x0.copy(),
            success=clean.predicted != y_true,
            y_pred_clean=clean.predicted,
            y_pred_adv=clean.predicted,
            final_loss=_safe_loss(objective, x0),
        )

    x = x0.copy()
    if acfg.random_start:
        x = np.clip(project_ball(_random_start(x0, acfg, sample_id), x0, acfg.norm, acfg.eps), lo, hi)

    trace = []
    aborted, reason = False, None
    for k in range(acfg.n_steps):
        try:
            loss, g = objective.loss_and_grad(x)
        except AttackAbortedError as e:
            logger.warning(f"attack on sample {sample_id} aborted at step {k}: {e}")
            aborted, reason = True, str(e)
            break
        x = project_ball(x + acfg.step * ascent_direction(g, acfg.norm), x0, acfg.norm, acfg.eps)
        x = np.clip(x, lo, hi)
        _check_iterate(x, x0, acfg, domain, k)
        trace.append({
            "step": k,
            "loss": loss,
            "linf_dist": float(np.max(np.abs(x - x0))),
            "l2_dist": float(np.linalg.norm(x - x0)),
        })

    final_loss = _safe_loss(objective, x)
    adv = classify(model, spec, x, solver_cfg, classify_tcfg, sample_id=sample_id)
    return AttackResult(
        x_adv=x,
        success=adv.predicted != y_true,
        trace=trace,
        y_pred_clean=clean.predicted,
        y_pred_adv=adv.predicted,
        final_loss=final_loss,
        aborted=aborted,
        abort_reason=reason,
    )


def run_attacks(
    model,
    dataset,
    acfg: AttackCfg,
    fixed_steps: int = 64,
    solver_cfg: Optional[SolverCfg] = None,
    tcfg: Optional[TraceCfg] = None,
    limit: Optional[int] = None,
    dequant_seed: int = 0,
) -> Tuple[List[dict], dict]:
    """
    Attack every sample (or the first `limit`) of a labeled dataset.

    Returns:
        (per-sample NDJSON records, summary)

    summary example:
        {
            "n_samples": 200,
            "clean_accuracy": 0.98,
            "adversarial_accuracy": 0.31,
            "adversarial_accuracy_stderr": 0.033,
            "success_rate": 0.69,
            "mean_linf_dist": 0.031,
            "mean_l2_dist": 0.044,
            "n_aborted": 0
        }
    """
    if len(dataset) == 0:
        raise ValueError("cannot attack an empty dataset")
    if limit is not None and limit < 1:
        raise ValueError(f"limit must be >= 1 or None, got {limit}")
    spec = model.spec
    x = dataset.continuous(dequant_seed)
    domain = dataset.continuous_domain
    n = len(dataset) if limit is None else min(limit, len(dataset))

    records = []
    for i in range(n):
        y = int(dataset.labels[i])
        result = pgd_attack(model, spec, x[i], y, acfg, fixed_steps, domain, solver_cfg, tcfg, sample_id=i)
        records.append(result.record(i, y, x[i], acfg))
        print(f"[{i+1}/{n}] y={y} clean={result.y_pred_clean} adv={result.y_pred_adv} success={result.success}")
    return records, attack_summary(records)


def attack_summary(records: List[dict]) -> dict:
    n = len(records)
    if n == 0:
        return {"n_samples": 0, "clean_accuracy": None, "adversarial_accuracy": None,
                "adversarial_accuracy_stderr": None, "success_rate": None,
                "mean_linf_dist": None, "mean_l2_dist": None, "n_aborted": 0}
    clean_acc = float(np.mean([r["y_pred_clean"] == r["y_true"] for r in records]))
    adv_acc = float(np.mean([r["y_pred_adv"] == r["y_true"] for r in records]))
    return {
        "n_samples": n,
        "clean_accuracy": clean_acc,
        "adversarial_accuracy": adv_acc,
        "adversarial_accuracy_stderr": binomial_stderr(adv_acc, n),
        "success_rate": float(np.mean([r["success"] for r in records])),
        "mean_linf_dist": float(np.mean([r["linf_dist"] for r in records])),
        "mean_l2_dist": float(np.mean([r["l2_dist"] for r in records])),
        "n_aborted": int(sum(r["aborted"] for r in records)),
    }
