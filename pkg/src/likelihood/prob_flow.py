"""
Probability-flow ODE likelihoods.

    log p_0(x) = log p_T(x(T)) + ∫_{t_eps}^{T} ∇·f̃(x(t), t, y) dt
    f̃(x, t, y) = f(x, t) − ½ g(t)² s(x, t, y)

Two integrators share the augmented state (x, ∫div):
    log_likelihood              adaptive Dormand–Prince RK45 (scipy), float results
    fixed_grid_log_likelihood   fixed-grid RK4 (torchdiffeq), differentiable in x

Usage:
    from src.likelihood.prob_flow import SolverCfg, TraceCfg, log_likelihood
    out = log_likelihood(model, spec, x0, SolverCfg(), TraceCfg(mode="exact"), y=1)
    out.logp, out.prior_term, out.div_integral, out.nfe
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import RK45
from torchdiffeq import odeint

from src.autodiff.diffengine import DTYPE, as_tensor, value_and_vjp
from src.diffusion.sde import SdeSpec, diffusion_sq, drift, per_row, prior_logpdf

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """ODE solve failed; carries the sample/label context when known."""

    def __init__(self, message: str, sample_id: Optional[int] = None, label: Optional[int] = None):
        super().__init__(message)
        self.sample_id = sample_id
        self.label = label


class SolverCfg(BaseModel):
    """
    Tolerances and budgets of the likelihood ODE solves.

    rtol and atol go straight to scipy's RK45, whose step-size controller
    (safety factor 0.9, error exponent 1/5, step change clamped to
    [0.2, 10]) is not configurable and so has no field here. max_steps caps
    accepted steps; fixed_steps sets the RK4 grid of the
    differentiable path used by attacks.
    """

    model_config = ConfigDict(frozen=True)

    rtol: float = Field(default=1e-5, gt=0)
    atol: float = Field(default=1e-5, gt=0)
    max_steps: int = Field(default=100_000, ge=1)
    fixed_steps: int = Field(default=64, ge=8)


class TraceMode(str, Enum):
    EXACT = "exact"
    HUTCHINSON = "hutchinson"


class ProbeLaw(str, Enum):
    RADEMACHER = "rademacher"
    GAUSSIAN = "gaussian"


class TraceCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: TraceMode = TraceMode.HUTCHINSON
    n_probes: int = 30
    probe: ProbeLaw = ProbeLaw.RADEMACHER
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def check_probes(self):
        if self.mode == TraceMode.HUTCHINSON and self.n_probes < 1:
            raise ValueError(f"Hutchinson trace needs n_probes >= 1, got {self.n_probes}")
        return self


@dataclass(frozen=True)
class LikelihoodOut:
    logp: float
    prior_term: float
    div_integral: float
    x_T: np.ndarray
    nfe: int

    @classmethod
    def from_terms(cls, prior_term: float, div_integral: float, x_T: np.ndarray, nfe: int):
        return cls(
            logp=prior_term + div_integral,
            prior_term=prior_term,
            div_integral=div_integral,
            x_T=x_T,
            nfe=nfe,
        )


def probe_vectors(tcfg: TraceCfg, dim: int, sample_id: int = 0, n: Optional[int] = None) -> torch.Tensor:
    """
    Probe vectors ε_0..ε_{n-1} of shape (n, dim).

    Probe i is drawn from a generator seeded by (seed, sample_id, i), so a
    shorter stream is always a prefix of a longer one and every class of the
    same sample sees the same probes.
    """
    n = tcfg.n_probes if n is None else n
    if n < 1:
        raise ValueError(f"need at least one probe, got n={n}")
    rows = []
    for i in range(n):
        rng = np.random.default_rng([tcfg.seed, sample_id, i])
        if tcfg.probe == ProbeLaw.RADEMACHER:
            rows.append(rng.integers(0, 2, size=dim) * 2.0 - 1.0)
        else:
            rows.append(rng.standard_normal(dim))
    return torch.as_tensor(np.stack(rows), dtype=DTYPE)


def ode_rhs(model, spec: SdeSpec, x, t, y=None) -> torch.Tensor:
    """f(x, t) − ½ g(t)² s(x, t, y)."""
    x = as_tensor(x)
    score = model(x, t, y)
    if not bool(torch.all(torch.isfinite(score))):
        raise SolverError(f"non-finite score output at t={float(t):.6g}")
    return drift(spec, x, t) - 0.5 * per_row(diffusion_sq(spec, t), x) * score


def field_divergence(
    F: Callable[[torch.Tensor], torch.Tensor],
    x,
    probes: Optional[torch.Tensor] = None,
    create_graph: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Value and divergence of a vector field F: R^D -> R^D at a single point.

    probes=None computes the exact trace from the D basis vectors; otherwise
    the Hutchinson mean of εᵀ(∂F/∂x)ε over the probe rows. All vectors are
    evaluated in one batched forward/backward sweep.
    """
    x = as_tensor(x)
    if x.dim() != 1:
        raise ValueError(f"divergence is evaluated at a single point of shape (D,), got {tuple(x.shape)}")
    dim = x.shape[0]
    exact = probes is None
    vectors = torch.eye(dim, dtype=DTYPE) if exact else as_tensor(probes)
    if vectors.dim() != 2 or vectors.shape[1] != dim:
        raise ValueError(f"probes must have shape (n, {dim}), got {tuple(vectors.shape)}")
    x_rep = x.unsqueeze(0).repeat(vectors.shape[0], 1)
    values, rows = value_and_vjp(F, x_rep, vectors, create_graph=create_graph)
    quad = (rows * vectors).sum(dim=1)
    div = quad.sum() if exact else quad.mean()
    if not bool(torch.isfinite(div)):
        raise SolverError("non-finite divergence probe result")
    return values[0], div


def rhs_and_divergence(model, spec: SdeSpec, x, t, y=None, probes=None, create_graph: bool = False):
    """ode_rhs at x together with its divergence (exact when probes is None)."""
    return field_divergence(lambda z: ode_rhs(model, spec, z, t, y), x, probes, create_graph)


def divergence(model, spec: SdeSpec, x, t, y, tcfg: TraceCfg, sample_id: int = 0) -> torch.Tensor:
    """∇·f̃ at (x, t) per the trace configuration."""
    x = as_tensor(x)
    probes = None if tcfg.mode == TraceMode.EXACT else probe_vectors(tcfg, x.shape[-1], sample_id)
    return rhs_and_divergence(model, spec, x, t, y, probes)[1]


def rk45_integrate(rhs, x0, t0: float, t1: float, cfg: SolverCfg) -> Tuple[np.ndarray, int]:
    """
    Integrate dx/dt = rhs(t, x) from t0 to t1 with adaptive Dormand–Prince RK45.

    Returns:
        (x(t1), number of rhs evaluations)

    Raises:
        SolverError: step budget exhausted, step failure, or non-finite state
    """
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")
    x0 = np.asarray(x0, dtype=np.float64)

    def checked_rhs(t, x):
        dx = np.asarray(rhs(t, x), dtype=np.float64)
        # scipy shrinks the step forever on a nan derivative
        if not np.all(np.isfinite(dx)):
            raise SolverError(f"non-finite derivative at t={t:.6g}")
        return dx

    solver = RK45(checked_rhs, t0, x0, t1, rtol=cfg.rtol, atol=cfg.atol)
    steps = 0
    while solver.status == "running":
        if steps >= cfg.max_steps:
            raise SolverError(f"max steps ({cfg.max_steps}) exceeded at t={solver.t:.6g}")
        message = solver.step()
        steps += 1
        if solver.status == "failed":
            raise SolverError(f"RK45 step failed at t={solver.t:.6g}: {message}")
        if not np.all(np.isfinite(solver.y)):
            raise SolverError(f"non-finite state at t={solver.t:.6g}")
    return solver.y.copy(), solver.nfev


def _probes_for(tcfg: Optional[TraceCfg], dim: int, sample_id: int) -> Optional[torch.Tensor]:
    if tcfg is None or tcfg.mode == TraceMode.EXACT:
        return None
    return probe_vectors(tcfg, dim, sample_id)


def log_likelihood(
    model,
    spec: SdeSpec,
    x0,
    cfg: SolverCfg,
    tcfg: TraceCfg,
    y: Optional[int] = None,
    sample_id: int = 0,
) -> LikelihoodOut:
    """
    log p(x0 | y) (or log p(x0) with y=None) via the adaptive solver.

    The same probe vectors are used at every rhs evaluation of the solve.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x0)):
        raise ValueError(f"x0 must be finite (sample {sample_id})")
    dim = x0.shape[0]
    probes = _probes_for(tcfg, dim, sample_id)

    def augmented(t, state):
        x = torch.from_numpy(state[:dim])
        f, div = rhs_and_divergence(model, spec, x, t, y, probes)
        return np.concatenate([f.numpy(), [div.item()]])

    state0 = np.concatenate([x0, [0.0]])
    try:
        state_T, nfe = rk45_integrate(augmented, state0, spec.t_eps, spec.t_max, cfg)
    except SolverError as e:
        logger.warning(f"likelihood solve failed (sample {sample_id}, label {y}): {e}")
        raise SolverError(f"sample {sample_id}, label {y}: {e}", sample_id=sample_id, label=y) from e

    x_T = state_T[:dim]
    prior_term = float(prior_logpdf(spec, torch.from_numpy(x_T)))
    return LikelihoodOut.from_terms(prior_term, float(state_T[dim]), x_T, nfe)


def fixed_grid_log_likelihood(
    model,
    spec: SdeSpec,
    x0,
    y: Optional[int] = None,
    fixed_steps: int = 64,
    tcfg: Optional[TraceCfg] = None,
    sample_id: int = 0,
) -> torch.Tensor:
    """
    log p(x0 | y) on a fixed RK4 grid of fixed_steps steps over [t_eps, T].

    Returns a scalar tensor; if x0 requires grad the result is differentiable
    with respect to it (the divergence term is kept on the tape, so its
    derivative brings in second derivatives of the score). tcfg=None or exact
    mode uses the exact trace; Hutchinson probes stay frozen for the solve.
    """
    if fixed_steps < 8:
        raise ValueError(f"fixed_steps must be >= 8, got {fixed_steps}")
    x0 = as_tensor(x0).reshape(-1)
    dim = x0.shape[0]
    probes = _probes_for(tcfg, dim, sample_id)
    create_graph = x0.requires_grad

    def func(t, state):
        x, _ = state
        f, div = rhs_and_divergence(model, spec, x, t, y, probes, create_graph=create_graph)
        return f, div.reshape(1)

    grid = torch.linspace(spec.t_eps, spec.t_max, fixed_steps + 1, dtype=DTYPE)
    xs, accs = odeint(func, (x0, torch.zeros(1, dtype=DTYPE)), grid, method="rk4")
    return prior_logpdf(spec, xs[-1]) + accs[-1, 0]


def dequantize(x_int, levels: int, u) -> np.ndarray:
    """(x_int + u) / levels with u ~ U[0, 1) per coordinate."""
    x_int = np.asarray(x_int)
    u = np.asarray(u, dtype=np.float64)
    if x_int.size and (x_int.min() < 0 or x_int.max() >= levels):
        raise ValueError(f"quantized entries must lie in [0, {levels})")
    if u.size and (u.min() < 0.0 or u.max() >= 1.0):
        raise ValueError("dequantization noise must lie in [0, 1)")
    return (x_int.astype(np.float64) + u) / levels


def bits_per_dim(logp: float, D: int, levels: int) -> float:
    """Negative log-likelihood in bits per dimension for data dequantized into [0, 1)^D."""
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    return -logp / (D * math.log(2.0)) + math.log2(levels)


def uniform_reference_logp(D: int) -> float:
    """Log-density of the uniform distribution on [0, 1)^D."""
    return 0.0


def likelihood_record(
    sample_id: int,
    label: Optional[int],
    y_cond: Optional[int],
    out: LikelihoodOut,
    tcfg: TraceCfg,
) -> dict:
    return {
        "sample_id": int(sample_id),
        "label": None if label is None else int(label),
        "y_cond": None if y_cond is None else int(y_cond),
        "logp": out.logp,
        "prior_term": out.prior_term,
        "div_integral": out.div_integral,
        "nfe": int(out.nfe),
        "n_probes": 0 if tcfg.mode == TraceMode.EXACT else tcfg.n_probes,
        "mode": tcfg.mode.value,
    }
