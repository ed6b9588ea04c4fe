"""
Score models s(x, t, y).

Three implementations share the ScoreModel contract (batched x of shape
(B, D) or a single vector of shape (D,); t a float or a (B,) tensor; y None,
an int, or a (B,) integer tensor):

    AnalyticGaussianScore   diffused N(μ, s² I), closed form
    AnalyticGmmScore        diffused class-conditional Gaussian mixtures
    MlpScoreNet             trainable conditional MLP (time embedding and
                            one-hot labels added to the first hidden layer)

Checkpoints of MlpScoreNet use the SBGC container from src.utils.io.
"""

import logging
import math
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from src.autodiff.diffengine import DTYPE, as_tensor
from src.diffusion.sde import SdeSpec, perturb_scale
from src.utils.io import read_container, write_container

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "model"


def _as_batch(x) -> Tuple[torch.Tensor, bool]:
    """Return x as (B, D) plus a flag telling whether it was a single vector."""
    x = as_tensor(x)
    if x.dim() == 1:
        return x.unsqueeze(0), True
    if x.dim() != 2:
        raise ValueError(f"score models take x of shape (D,) or (B, D), got {tuple(x.shape)}")
    return x, False


def _time_batch(t, batch: int) -> torch.Tensor:
    t = as_tensor(t)
    if t.dim() == 0:
        return t.expand(batch)
    if t.shape != (batch,):
        raise ValueError(f"t must be a scalar or shape ({batch},), got {tuple(t.shape)}")
    return t


def label_batch(y, batch: int, num_classes: int) -> Optional[torch.Tensor]:
    """Normalize a label argument to a (B,) long tensor, validating the range."""
    if y is None:
        return None
    y = torch.as_tensor(y, dtype=torch.long)
    if y.dim() == 0:
        y = y.expand(batch)
    if y.shape != (batch,):
        raise ValueError(f"y must be an int or shape ({batch},), got {tuple(y.shape)}")
    if bool(torch.any(y < 0)) or bool(torch.any(y >= num_classes)):
        raise ValueError(f"class id out of range for K={num_classes}: {y.tolist()}")
    return y


class ScoreModel(nn.Module):
    """Base class: forward(x, t, y=None) returns a tensor shaped like x."""

    def __init__(self, spec: SdeSpec, num_classes: int):
        super().__init__()
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.spec = spec
        self.num_classes = num_classes


def analytic_gaussian_score(mu, s2: float, spec: SdeSpec, x, t) -> torch.Tensor:
    """Score of the diffused N(μ, s² I): −(x − m μ) / (m² s² + σ²)."""
    if s2 <= 0:
        raise ValueError(f"s2 must be positive, got {s2}")
    mu = as_tensor(mu)
    xb, single = _as_batch(x)
    m, sigma = perturb_scale(spec, _time_batch(t, xb.shape[0]))
    var = m ** 2 * s2 + sigma ** 2
    out = -(xb - m[:, None] * mu) / var[:, None]
    return out[0] if single else out


class AnalyticGaussianScore(ScoreModel):
    """Single isotropic Gaussian N(μ, s² I); labels are accepted and ignored."""

    def __init__(self, mu, s2: float, spec: SdeSpec):
        super().__init__(spec, num_classes=1)
        if s2 <= 0:
            raise ValueError(f"s2 must be positive, got {s2}")
        self.register_buffer("mu", as_tensor(mu).clone())
        self.s2 = float(s2)

    def forward(self, x, t, y=None):
        return analytic_gaussian_score(self.mu, self.s2, self.spec, x, t)

    def log_density(self, x, t=None, y=None) -> torch.Tensor:
        """log p_t(x); t=None gives the data density at time zero."""
        xb, single = _as_batch(x)
        if t is None:
            m, sigma = torch.ones(xb.shape[0], dtype=DTYPE), torch.zeros(xb.shape[0], dtype=DTYPE)
        else:
            m, sigma = perturb_scale(self.spec, _time_batch(t, xb.shape[0]))
        var = m ** 2 * self.s2 + sigma ** 2
        d = xb.shape[1]
        sq = ((xb - m[:, None] * self.mu) ** 2).sum(dim=1)
        out = -0.5 * d * torch.log(2.0 * math.pi * var) - 0.5 * sq / var
        return out[0] if single else out


class AnalyticGmmScore(ScoreModel):
    """
    Class-conditional isotropic Gaussian mixtures diffused under an SdeSpec.

    Args:
        weights: (K, J) mixture weights, each row summing to one
        means: (K, J, D) component means
        s2: (K, J) component variances (scalar broadcast allowed)
    """

    def __init__(self, weights, means, s2, spec: SdeSpec):
        weights = as_tensor(weights)
        means = as_tensor(means)
        if weights.dim() != 2 or means.dim() != 3 or means.shape[:2] != weights.shape:
            raise ValueError(
                f"expected weights (K, J) and means (K, J, D), got "
                f"{tuple(weights.shape)} and {tuple(means.shape)}"
            )
        super().__init__(spec, num_classes=weights.shape[0])
        if bool(torch.any(weights < 0)) or not torch.allclose(
            weights.sum(dim=1), torch.ones(weights.shape[0], dtype=DTYPE), atol=1e-8
        ):
            raise ValueError(f"mixture weights must be nonnegative and sum to 1 per class: {weights.tolist()}")
        s2 = as_tensor(s2).expand(weights.shape).clone()
        if bool(torch.any(s2 <= 0)):
            raise ValueError("component variances must be positive")
        self.register_buffer("weights", weights.clone())
        self.register_buffer("means", means.clone())
        self.register_buffer("s2", s2)

    def _scales(self, t, batch: int):
        if t is None:
            return torch.ones(batch, dtype=DTYPE), torch.zeros(batch, dtype=DTYPE)
        return perturb_scale(self.spec, _time_batch(t, batch))

    def _components(self, xb: torch.Tensor, t):
        """Log-weighted component densities (B, K, J), offsets (B, K, J, D), variances (B, K, J)."""
        m, sigma = self._scales(t, xb.shape[0])
        var = m[:, None, None] ** 2 * self.s2 + sigma[:, None, None] ** 2
        diff = xb[:, None, None, :] - m[:, None, None, None] * self.means
        d = xb.shape[1]
        log_n = -0.5 * d * torch.log(2.0 * math.pi * var) - 0.5 * (diff ** 2).sum(dim=-1) / var
        return torch.log(self.weights) + log_n, diff, var

    def _select(self, log_c, diff, var, y):
        """Restrict to class y, or flatten all classes under a uniform prior."""
        batch = log_c.shape[0]
        if y is None:
            log_c = (log_c - math.log(self.num_classes)).reshape(batch, -1)
            return log_c, diff.reshape(batch, log_c.shape[1], -1), var.reshape(batch, -1)
        idx = torch.arange(batch)
        return log_c[idx, y], diff[idx, y], var[idx, y]

    def forward(self, x, t, y=None):
        xb, single = _as_batch(x)
        y = label_batch(y, xb.shape[0], self.num_classes)
        log_c, diff, var = self._select(*self._components(xb, t), y)
        resp = torch.softmax(log_c, dim=1)
        out = (resp[:, :, None] * (-diff / var[:, :, None])).sum(dim=1)
        return out[0] if single else out

    def log_density(self, x, t=None, y=None) -> torch.Tensor:
        """log p_t(x | y), or the uniform-prior marginal when y is None."""
        xb, single = _as_batch(x)
        y = label_batch(y, xb.shape[0], self.num_classes)
        log_c, _, _ = self._select(*self._components(xb, t), y)
        out = torch.logsumexp(log_c, dim=1)
        return out[0] if single else out


class MlpConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    hidden: List[int] = Field(default_factory=lambda: [256, 256, 256])
    embed_dim: int = Field(default=64, ge=2)
    min_freq: float = 1.0
    max_freq: float = 1000.0
    zero_head: bool = False


class MlpScoreNet(ScoreModel):
    """
    Conditional MLP score network.

    First layer: W [x ‖ emb(t)] + b + P onehot(y), followed by SiLU and the
    remaining hidden layers; the linear head output is divided by σ(t).
    Without a label the projection term is dropped (unconditional mode).
    """

    def __init__(
        self,
        dim: int,
        num_classes: int,
        spec: SdeSpec,
        config: Optional[MlpConfig] = None,
        init_seed: int = 0,
    ):
        super().__init__(spec, num_classes)
        config = config or MlpConfig()
        if not config.hidden:
            raise ValueError("MlpConfig.hidden must list at least one width")
        self.dim = dim
        self.config = config
        n_freq = config.embed_dim // 2
        freqs = torch.logspace(
            math.log10(config.min_freq), math.log10(config.max_freq), n_freq, dtype=DTYPE
        )
        self.register_buffer("freqs", freqs)

        widths = list(config.hidden)
        # parameter init must not depend on (or disturb) the global torch RNG
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.input = nn.Linear(dim + 2 * n_freq, widths[0])
            self.label_proj = nn.Linear(num_classes, widths[0], bias=False)
            self.layers = nn.ModuleList(
                nn.Linear(w_in, w_out) for w_in, w_out in zip(widths[:-1], widths[1:])
            )
            self.head = nn.Linear(widths[-1], dim)
        if config.zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.double()

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        angles = t[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    def network_output(self, x, t, y=None) -> torch.Tensor:
        """Raw head output before the 1/σ(t) scaling."""
        xb, single = _as_batch(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"expected data dimension {self.dim}, got {xb.shape[1]}")
        tb = _time_batch(t, xb.shape[0])
        y = label_batch(y, xb.shape[0], self.num_classes)
        h = self.input(torch.cat([xb, self.time_embedding(tb)], dim=1))
        if y is not None:
            h = h + self.label_proj(F.one_hot(y, self.num_classes).to(DTYPE))
        h = F.silu(h)
        for layer in self.layers:
            h = F.silu(layer(h))
        out = self.head(h)
        return out[0] if single else out

    def forward(self, x, t, y=None):
        xb, single = _as_batch(x)
        tb = _time_batch(t, xb.shape[0])
        _, sigma = perturb_scale(self.spec, tb)
        out = self.network_output(xb, tb, y) / sigma[:, None]
        return out[0] if single else out

    def architecture(self) -> dict:
        return {"type": "mlp", "dim": self.dim, **self.config.model_dump(mode="json")}


def save_checkpoint(net: MlpScoreNet, path) -> None:
    """Write parameters (declaration order, little-endian float64) plus metadata."""
    params = list(net.named_parameters())
    header = {
        "kind": CHECKPOINT_KIND,
        "architecture": net.architecture(),
        "sde": net.spec.model_dump(mode="json"),
        "num_classes": net.num_classes,
        "parameters": [[name, list(p.shape)] for name, p in params],
    }
    payload = b"".join(
        p.detach().cpu().numpy().astype("<f8").tobytes(order="C") for _, p in params
    )
    write_container(path, header, payload)
    logger.info(f"Saved checkpoint with {sum(p.numel() for _, p in params)} parameters to {path}")


def load_checkpoint(path) -> MlpScoreNet:
    header, payload = read_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path} is not a model checkpoint (kind={header.get('kind')!r})")
    arch = dict(header["architecture"])
    if arch.pop("type", None) != "mlp":
        raise ValueError(f"unsupported architecture in {path}: {header['architecture']}")
    dim = arch.pop("dim")
    net = MlpScoreNet(dim, header["num_classes"], SdeSpec(**header["sde"]), MlpConfig(**arch))

    flat = np.frombuffer(payload, dtype="<f8")
    offset = 0
    with torch.no_grad():
        for (name, p), (stored_name, shape) in zip(net.named_parameters(), header["parameters"]):
            if name != stored_name or list(p.shape) != list(shape):
                raise ValueError(f"checkpoint layout mismatch at {stored_name} {shape} vs {name} {list(p.shape)}")
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset:offset + n].copy()).reshape(p.shape))
            offset += n
    if offset != flat.size:
        raise ValueError(f"checkpoint payload has {flat.size} values, expected {offset}")
    return net
