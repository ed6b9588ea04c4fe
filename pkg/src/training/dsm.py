"""
Likelihood-weighted denoising score matching.

Per-sample objective with λ(t) = g(t)²:

    ½ · g(t)² / σ(t)² · ‖σ(t) s_θ(m(t) x0 + σ(t) z, t, y) + z‖²

With importance sampling, t is drawn from q(t) ∝ g(t)²/σ(t)² on [t_eps, T]
and each term is multiplied by the ratio of the uniform density to q, so the
estimate of the time integral is unchanged in expectation.
"""

import copy
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.integrate import cumulative_trapezoid

from src.autodiff.diffengine import DTYPE, as_tensor
from src.diffusion.sde import SdeSpec, diffusion_sq, perturb_scale, per_row
from src.utils.io import write_csv

logger = logging.getLogger(__name__)

IMPORTANCE_GRID_POINTS = 4096
LOSS_TRACE_FIELDS = ["step", "loss", "smoothed_loss"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class TrainCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_size: int = Field(default=256, ge=1)
    steps: int = Field(default=20_000, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0)
    ema_decay: float = 0.999
    importance_sampling: bool = True
    seed: int = Field(default=0, ge=0)
    # smoothing factor of the smoothed_loss column in the loss trace
    loss_smoothing: float = Field(default=0.99, ge=0.0, lt=1.0)
    log_every: int = Field(default=1000, ge=1)

    @field_validator("ema_decay")
    @classmethod
    def check_ema_decay(cls, v):
        # decay 0 is accepted: the EMA copy then tracks the parameters exactly
        if not 0.0 <= v < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {v}")
        return v


@dataclass
class TrainResult:
    net: torch.nn.Module
    ema_net: torch.nn.Module
    loss_trace: List[dict] = field(default_factory=list)


class ImportanceSampler:
    """Inverse-CDF sampler for q(t) ∝ g(t)²/σ(t)², tabulated on a geometric grid."""

    def __init__(self, spec: SdeSpec, n_grid: int = IMPORTANCE_GRID_POINTS):
        self.spec = spec
        # the density behaves like 1/t near t_eps, so the grid is geometric
        grid = np.geomspace(spec.t_eps, spec.t_max, n_grid)
        grid[0], grid[-1] = spec.t_eps, spec.t_max
        t = torch.from_numpy(grid)
        density = (diffusion_sq(spec, t) / perturb_scale(spec, t).std ** 2).numpy()
        cdf = cumulative_trapezoid(density, grid, initial=0.0)
        self.grid = grid
        self.cdf = cdf / cdf[-1]
        # the sampled law is the piecewise-constant density of the interpolated CDF
        self.cell_density = np.diff(self.cdf) / np.diff(grid)

    def sample(self, u) -> Tuple[np.ndarray, np.ndarray]:
        u = np.asarray(u, dtype=np.float64)
        if u.size and (u.min() < 0.0 or u.max() >= 1.0):
            raise ValueError("importance-sampling draws must lie in [0, 1)")
        t = np.interp(u, self.cdf, self.grid)
        cell = np.clip(np.searchsorted(self.cdf, u, side="right") - 1, 0, len(self.cell_density) - 1)
        uniform_density = 1.0 / (self.spec.t_max - self.spec.t_eps)
        return t, uniform_density / self.cell_density[cell]


@lru_cache(maxsize=16)
def importance_sampler(spec: SdeSpec) -> ImportanceSampler:
    return ImportanceSampler(spec)


def sample_t_importance(spec: SdeSpec, u):
    """
    Map uniform draws u ∈ [0, 1) to (t, weight).

    u=0 gives t_eps and u→1 gives t→T. weight is the uniform density on
    [t_eps, T] divided by the sampling density at t.
    """
    t, w = importance_sampler(spec).sample(u)
    if t.ndim == 0:
        return float(t), float(w)
    return t, w


def dsm_loss(net, spec: SdeSpec, x0, y, t, z, weights=None) -> torch.Tensor:
    """
    Batch mean of the likelihood-weighted denoising residual.

    Args:
        net: score model called as net(x_t, t, y)
        x0: (B, D) clean samples
        y: (B,) labels, an int, or None (unconditional)
        t: (B,) diffusion times in [t_eps, T]
        z: (B, D) standard-normal noise
        weights: optional (B,) importance weights

    Returns:
        scalar tensor
    """
    x0 = as_tensor(x0)
    z = as_tensor(z)
    t = as_tensor(t)
    if x0.shape != z.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and z {tuple(z.shape)} must have the same shape")
    if t.shape != (x0.shape[0],):
        raise ValueError(f"t must have shape ({x0.shape[0]},), got {tuple(t.shape)}")
    tol = 1e-12 * spec.t_max
    if bool(torch.any(t < spec.t_eps - tol)) or bool(torch.any(t > spec.t_max + tol)):
        raise ValueError(f"diffusion times must lie in [{spec.t_eps}, {spec.t_max}]")

    m, sigma = perturb_scale(spec, t)
    x_t = per_row(m, x0) * x0 + per_row(sigma, x0) * z
    residual = per_row(sigma, x0) * net(x_t, t, y) + z
    per_sample = 0.5 * diffusion_sq(spec, t) / sigma ** 2 * (residual ** 2).sum(dim=1)
    if weights is not None:
        per_sample = per_sample * as_tensor(weights)
    return per_sample.mean()


def _stream_seeds(seed: int, n: int) -> List[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def update_ema(ema_net: torch.nn.Module, net: torch.nn.Module, decay: float):
    with torch.no_grad():
        for ema_param, param in zip(ema_net.parameters(), net.parameters()):
            ema_param.mul_(decay).add_(param, alpha=1.0 - decay)


def train(net, dataset, cfg: TrainCfg) -> TrainResult:
    """
    Adam on the DSM objective with an EMA copy of the parameters.

    RNG streams (shuffling, t draws, noise, dequantization) are spawned from
    cfg.seed and independent of each other and of the global RNG.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.labels.max() >= net.num_classes:
        raise ValueError(f"dataset labels exceed the model's {net.num_classes} classes")
    spec = net.spec
    n = len(dataset)
    flat = dataset.samples.reshape(n, -1)
    labels = torch.from_numpy(dataset.labels)

    shuffle_rng, t_rng, noise_rng, dequant_rng = (
        np.random.default_rng(s) for s in _stream_seeds(cfg.seed, 4)
    )
    ema_net = copy.deepcopy(net)
    for p in ema_net.parameters():
        p.requires_grad_(False)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)

    print(f"Training for {cfg.steps} steps on {n} samples (batch {cfg.batch_size}, seed {cfg.seed}).")

    loss_trace = []
    smoothed = None
    order = shuffle_rng.permutation(n)
    cursor = 0
    net.train()
    for step in range(cfg.steps):
        idx = []
        while len(idx) < cfg.batch_size:
            if cursor == n:
                order = shuffle_rng.permutation(n)
                cursor = 0
            take = min(cfg.batch_size - len(idx), n - cursor)
            idx.extend(order[cursor:cursor + take])
            cursor += take
        idx = np.asarray(idx)

        batch = flat[idx]
        if dataset.quantized:
            batch = (batch + dequant_rng.random(batch.shape)) / dataset.levels
        x0 = torch.as_tensor(batch, dtype=DTYPE)

        u = t_rng.random(cfg.batch_size)
        if cfg.importance_sampling:
            t, w = sample_t_importance(spec, u)
            weights = torch.from_numpy(w)
        else:
            t, weights = spec.t_eps + (spec.t_max - spec.t_eps) * u, None
        z = torch.from_numpy(noise_rng.standard_normal(x0.shape))

        loss = dsm_loss(net, spec, x0, labels[idx], torch.from_numpy(t), z, weights)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            logger.warning(f"non-finite DSM loss at step {step}")
            raise TrainingDivergedError(f"non-finite loss {loss_value} at step {step}", step=step)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        update_ema(ema_net, net, cfg.ema_decay)

        smoothed = loss_value if smoothed is None else (
            cfg.loss_smoothing * smoothed + (1.0 - cfg.loss_smoothing) * loss_value
        )
        loss_trace.append({"step": step, "loss": loss_value, "smoothed_loss": smoothed})
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps:
            print(f"[{step+1}/{cfg.steps}] loss={loss_value:.4f} smoothed_loss={smoothed:.4f}")

    net.eval()
    ema_net.eval()
    return TrainResult(net=net, ema_net=ema_net, loss_trace=loss_trace)


def write_loss_trace(loss_trace: List[dict], path) -> None:
    write_csv(path, loss_trace, fieldnames=LOSS_TRACE_FIELDS)
