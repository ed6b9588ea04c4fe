"""
Toy datasets with analytic ground truth.

gen_gmm_dataset      class-conditional Gaussian mixtures (closed-form Bayes oracle)
gen_toyimage_dataset 8-bit oriented gratings, one orientation per class
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from src.diffusion.score_models import AnalyticGmmScore
from src.diffusion.sde import SdeSpec
from src.likelihood.prob_flow import dequantize

MAX_PATTERN_FAMILIES = 8


@dataclass
class Dataset:
    """
    samples: (N, D) floats, or (N, H, W) integers in [0, levels) when quantized
    labels: (N,) class ids < num_classes
    domain: value range of samples in data units (quantized: [0, levels))
    """
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    quantized: bool = False
    levels: Optional[int] = None
    domain: Tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.samples.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.samples.shape[0]} samples"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.quantized:
            if self.levels is None or self.levels < 2:
                raise ValueError("quantized datasets need levels >= 2")
            if not np.issubdtype(self.samples.dtype, np.integer):
                raise ValueError(f"quantized samples must be integers, got {self.samples.dtype}")
            if self.samples.size and (self.samples.min() < 0 or self.samples.max() >= self.levels):
                raise ValueError(f"quantized samples must lie in [0, {self.levels})")
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError(f"empty domain {self.domain}")
        self.domain = (float(lo), float(hi))

    def __len__(self):
        return int(self.samples.shape[0])

    @property
    def dim(self) -> int:
        return int(np.prod(self.samples.shape[1:]))

    @property
    def is_image(self) -> bool:
        return self.samples.ndim == 3

    @property
    def continuous_domain(self) -> Tuple[float, float]:
        """Value range of continuous() output."""
        return (0.0, 1.0) if self.quantized else self.domain

    def continuous(self, seed: int = 0) -> np.ndarray:
        """Flattened (N, D) float view; quantized data is uniformly dequantized into [0, 1)."""
        flat = self.samples.reshape(len(self), -1)
        if not self.quantized:
            return flat.astype(np.float64)
        u = np.random.default_rng(seed).random(flat.shape)
        return dequantize(flat, self.levels, u)

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            samples=self.samples[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            quantized=self.quantized,
            levels=self.levels,
            domain=self.domain,
        )


class GmmOracle:
    """Closed-form class densities and Bayes rule for the generating mixtures."""

    def __init__(self, weights, means, s2):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.s2 = np.broadcast_to(np.asarray(s2, dtype=np.float64), self.weights.shape).copy()
        self.num_classes = self.weights.shape[0]

    def class_log_densities(self, x) -> np.ndarray:
        """(N, K) matrix of log p(x | y)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d = x.shape[1]
        diff = x[:, None, None, :] - self.means[None]
        sq = (diff ** 2).sum(axis=-1)
        log_n = -0.5 * d * np.log(2.0 * math.pi * self.s2) - 0.5 * sq / self.s2
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return logsumexp(log_w + log_n, axis=2)

    def log_density(self, x, y: int) -> np.ndarray:
        return self.class_log_densities(x)[:, y]

    def marginal_log_density(self, x) -> np.ndarray:
        """Uniform class prior."""
        return logsumexp(self.class_log_densities(x), axis=1) - math.log(self.num_classes)

    def posterior(self, x) -> np.ndarray:
        logs = self.class_log_densities(x)
        return np.exp(logs - logsumexp(logs, axis=1, keepdims=True))

    def bayes_predict(self, x) -> np.ndarray:
        return np.argmax(self.class_log_densities(x), axis=1)

    def bayes_accuracy(self, dataset: Dataset) -> float:
        if len(dataset) == 0:
            raise ValueError("Bayes accuracy of an empty dataset is undefined")
        return float(np.mean(self.bayes_predict(dataset.continuous()) == dataset.labels))

    def score_model(self, spec: SdeSpec) -> AnalyticGmmScore:
        return AnalyticGmmScore(self.weights, self.means, self.s2, spec)


def gen_gmm_dataset(
    K: int,
    D: int,
    modes,
    scale: float,
    n_per_class: int,
    seed: int,
    weights=None,
) -> Tuple[Dataset, GmmOracle]:
    """
    Draw n_per_class samples from each class mixture.

    Args:
        modes: (K, D) one mode per class, or (K, J, D) J modes per class
        scale: component standard deviation (isotropic)
        weights: optional (K, J) mixture weights (default uniform)

    Returns:
        (Dataset shuffled with the same seed, GmmOracle)
    """
    if K < 1 or D < 1:
        raise ValueError(f"need K >= 1 and D >= 1, got K={K}, D={D}")
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    means = np.asarray(modes, dtype=np.float64)
    if means.ndim == 2:
        means = means[:, None, :]
    if means.shape[0] != K or means.shape[2] != D:
        raise ValueError(f"modes must be (K, D) or (K, J, D) with K={K}, D={D}, got {means.shape}")
    n_comp = means.shape[1]
    if weights is None:
        weights = np.full((K, n_comp), 1.0 / n_comp)
    oracle = GmmOracle(weights, means, scale ** 2)

    rng = np.random.default_rng(seed)
    samples, labels = [], []
    for y in range(K):
        comp = rng.choice(n_comp, size=n_per_class, p=oracle.weights[y])
        noise = rng.standard_normal((n_per_class, D))
        samples.append(means[y, comp] + scale * noise)
        labels.append(np.full(n_per_class, y, dtype=np.int64))
    samples = np.concatenate(samples, axis=0)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))

    # covers both the modes out to 5 sigma and every draw
    lo = float(means.min()) - 5.0 * scale
    hi = float(means.max()) + 5.0 * scale
    if samples.size:
        lo = min(lo, float(samples.min()))
        hi = max(hi, float(samples.max()))
    lo, hi = math.floor(lo), math.ceil(hi)
    dataset = Dataset(
        samples=samples[order],
        labels=labels[order],
        num_classes=K,
        quantized=False,
        levels=None,
        domain=(lo, hi),
    )
    return dataset, oracle


def grating(H: int, W: int, angle: float, cycles: float = 2.0, contrast: float = 0.3) -> np.ndarray:
    """Oriented cosine grating with values in [0.5 - contrast, 0.5 + contrast]."""
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    freq = cycles / min(H, W)
    phase = 2.0 * math.pi * freq * (cols * math.cos(angle) + rows * math.sin(angle))
    return 0.5 + contrast * np.cos(phase)


def gen_toyimage_dataset(
    K: int,
    H: int,
    W: int,
    n_per_class: int,
    seed: int,
    noise_amplitude: float = 0.1,
    levels: int = 256,
) -> Dataset:
    """
    Quantized grating images; class k is oriented at angle k·π/K.

    Pixel noise of standard deviation noise_amplitude (in [0, 1] units) is
    added before quantization, so noise_amplitude=0 makes every sample of a
    class identical.
    """
    if not 1 <= K <= MAX_PATTERN_FAMILIES:
        raise ValueError(f"K must be in [1, {MAX_PATTERN_FAMILIES}], got {K}")
    rng = np.random.default_rng(seed)
    samples, labels = [], []
    for y in range(K):
        base = grating(H, W, angle=y * math.pi / K)
        noisy = base[None] + noise_amplitude * rng.standard_normal((n_per_class, H, W))
        quantized = np.clip(np.floor(noisy * levels), 0, levels - 1).astype(np.int64)
        samples.append(quantized)
        labels.append(np.full(n_per_class, y, dtype=np.int64))
    samples = np.concatenate(samples, axis=0)
    labels = np.concatenate(labels)
    order = rng.permutation(len(labels))
    return Dataset(
        samples=samples[order],
        labels=labels[order],
        num_classes=K,
        quantized=True,
        levels=levels,
        domain=(0.0, float(levels)),
    )


def sample_pairs(dataset: Dataset, n_pairs: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Draw n_pairs (x_A, x_B) of distinct samples from the continuous view."""
    if len(dataset) < 2:
        raise ValueError("need at least two samples to form interpolation pairs")
    rng = np.random.default_rng(seed)
    x = dataset.continuous(seed)
    pairs = []
    for _ in range(n_pairs):
        a, b = rng.choice(len(dataset), size=2, replace=False)
        pairs.append((x[a], x[b]))
    return pairs
