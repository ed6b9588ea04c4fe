"""
Forward diffusion processes (VP and sub-VP) with a linear β schedule.

All functions accept python floats or float64 tensors for t (a tensor t is
broadcast against the leading batch dimension of x) and return float64
tensors.
"""

import math
from enum import Enum
from typing import NamedTuple, Union

import torch
from pydantic import BaseModel, ConfigDict, model_validator

from src.autodiff.diffengine import as_tensor

TimeLike = Union[float, torch.Tensor]

LOG_2PI = math.log(2.0 * math.pi)


class SdeKind(str, Enum):
    VP = "vp"
    SUBVP = "subvp"


class SdeSpec(BaseModel):
    """Diffusion definition: kind, linear β schedule on [0, t_max], and t_eps."""

    model_config = ConfigDict(frozen=True)

    kind: SdeKind = SdeKind.VP
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_max: float = 1.0
    t_eps: float = 1e-5

    @model_validator(mode="after")
    def check_ranges(self):
        if not (0.0 < self.t_eps < self.t_max):
            raise ValueError(f"need 0 < t_eps < t_max, got t_eps={self.t_eps}, t_max={self.t_max}")
        if not (self.beta_max >= self.beta_min > 0.0):
            raise ValueError(
                f"need beta_max >= beta_min > 0, got beta_min={self.beta_min}, beta_max={self.beta_max}"
            )
        return self


class PerturbScale(NamedTuple):
    """Perturbation kernel p_t(x_t | x_0) = N(mean_coeff * x_0, std² I)."""
    mean_coeff: torch.Tensor
    std: torch.Tensor


def _time(spec: SdeSpec, t: TimeLike, allow_zero: bool) -> torch.Tensor:
    t = as_tensor(t)
    lo_ok = bool(torch.all(t >= 0.0)) if allow_zero else bool(torch.all(t > 0.0))
    # tolerate round-off at the right endpoint (grids built from linspace)
    hi_ok = bool(torch.all(t <= spec.t_max * (1.0 + 1e-12)))
    if not (lo_ok and hi_ok):
        interval = "[0, T]" if allow_zero else "(0, T]"
        raise ValueError(f"t must lie in {interval} with T={spec.t_max}, got {t.tolist()}")
    return t


def per_row(coeff: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Reshape a per-sample coefficient so it broadcasts over trailing data dims."""
    if coeff.dim() == 0 or x.dim() <= 1:
        return coeff
    return coeff.reshape(coeff.shape + (1,) * (x.dim() - coeff.dim()))


def beta(spec: SdeSpec, t: TimeLike) -> torch.Tensor:
    t = _time(spec, t, allow_zero=True)
    return spec.beta_min + t * (spec.beta_max - spec.beta_min) / spec.t_max


def integrated_beta(spec: SdeSpec, t: TimeLike) -> torch.Tensor:
    """∫₀ᵗ β(s) ds = β_min t + ½ t² (β_max − β_min) / T."""
    t = _time(spec, t, allow_zero=True)
    return spec.beta_min * t + 0.5 * t ** 2 * (spec.beta_max - spec.beta_min) / spec.t_max


def drift(spec: SdeSpec, x, t: TimeLike) -> torch.Tensor:
    """f(x, t) = −½ β(t) x for both VP and sub-VP."""
    t = _time(spec, t, allow_zero=False)
    x = as_tensor(x)
    return -0.5 * per_row(beta(spec, t), x) * x


def diffusion_sq(spec: SdeSpec, t: TimeLike) -> torch.Tensor:
    """g(t)²; sub-VP scales β by (1 − e^{−2∫β})."""
    t = _time(spec, t, allow_zero=False)
    b = beta(spec, t)
    if spec.kind == SdeKind.VP:
        return b
    return b * -torch.expm1(-2.0 * integrated_beta(spec, t))


def diffusion(spec: SdeSpec, t: TimeLike) -> torch.Tensor:
    return torch.sqrt(diffusion_sq(spec, t))


def perturb_scale(spec: SdeSpec, t: TimeLike) -> PerturbScale:
    t = _time(spec, t, allow_zero=False)
    ib = integrated_beta(spec, t)
    mean_coeff = torch.exp(-0.5 * ib)
    if spec.kind == SdeKind.VP:
        # 1 − m² = 1 − e^{−∫β}
        std = torch.sqrt(-torch.expm1(-ib))
    else:
        std = -torch.expm1(-ib)
    return PerturbScale(mean_coeff=mean_coeff, std=std)


def prior_logpdf(spec: SdeSpec, x) -> torch.Tensor:
    """
    Standard-normal log-density over the last axis of x (nats).

    The sub-VP terminal variance (1 − e^{−∫β(T)})² is within 1e-4 of one for
    the default schedule, so both kinds share the N(0, I) prior.
    """
    x = as_tensor(x)
    d = x.shape[-1] if x.dim() > 0 else 1
    sq = (x ** 2).sum(dim=-1) if x.dim() > 0 else x ** 2
    return -0.5 * d * LOG_2PI - 0.5 * sq
