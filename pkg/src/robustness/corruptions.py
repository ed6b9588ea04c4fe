"""
Severity-graded corruptions and the corruption accuracy grid.

    gaussian_noise  additive N(0, s²), s = table value × data range
    impulse_noise   a fraction of coordinates set to the domain extremes
    gaussian_blur   Gaussian filter with σ in pixels (images only)
    contrast        x ← mean + c (x − mean) per image (images only)

Quantized datasets are corrupted in integer units and rounded back to
[0, levels).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.ndimage import gaussian_filter

from src.classification.classifier import evaluate_accuracy
from src.experiments.datasets import Dataset

logger = logging.getLogger(__name__)

N_SEVERITIES = 5
CORRUPTION_CSV_FIELDS = ["kind", "severity", "parameter", "accuracy"]


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    IMPULSE_NOISE = "impulse_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    CONTRAST = "contrast"


NOISE_KINDS = (CorruptionKind.GAUSSIAN_NOISE, CorruptionKind.IMPULSE_NOISE)
SPATIAL_KINDS = (CorruptionKind.GAUSSIAN_BLUR, CorruptionKind.CONTRAST)
KIND_INDEX = {kind: i for i, kind in enumerate(CorruptionKind)}

DEFAULT_SEVERITY_TABLES = {
    CorruptionKind.GAUSSIAN_NOISE: [0.04, 0.06, 0.08, 0.09, 0.10],
    CorruptionKind.IMPULSE_NOISE: [0.03, 0.06, 0.09, 0.17, 0.27],
    CorruptionKind.GAUSSIAN_BLUR: [0.4, 0.6, 0.8, 1.0, 1.5],
    CorruptionKind.CONTRAST: [0.4, 0.3, 0.2, 0.1, 0.05],
}


class CorruptionSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: CorruptionKind
    severity: int = Field(ge=1, le=N_SEVERITIES)


class CorruptionGrid(BaseModel):
    """Severity tables (five parameters per kind) and the kinds to evaluate."""

    model_config = ConfigDict(frozen=True)

    tables: Dict[CorruptionKind, List[float]] = Field(
        default_factory=lambda: {k: list(v) for k, v in DEFAULT_SEVERITY_TABLES.items()}
    )
    kinds: List[CorruptionKind] = Field(default_factory=lambda: list(CorruptionKind))

    @field_validator("tables")
    @classmethod
    def check_tables(cls, tables):
        for kind, values in tables.items():
            if len(values) != N_SEVERITIES:
                raise ValueError(f"{kind.value}: need {N_SEVERITIES} severity values, got {len(values)}")
            if any(v < 0 for v in values):
                raise ValueError(f"{kind.value}: severity values must be nonnegative")
            if kind == CorruptionKind.IMPULSE_NOISE and any(v > 1 for v in values):
                raise ValueError("impulse_noise fractions must lie in [0, 1]")
        return tables

    def parameter(self, spec: CorruptionSpec) -> float:
        if spec.kind not in self.tables:
            raise ValueError(f"no severity table for {spec.kind.value}")
        return float(self.tables[spec.kind][spec.severity - 1])

    @classmethod
    def identity(cls, kinds=None) -> "CorruptionGrid":
        """Grid whose every cell leaves the data unchanged."""
        neutral = {k: [1.0 if k == CorruptionKind.CONTRAST else 0.0] * N_SEVERITIES for k in CorruptionKind}
        return cls(tables=neutral, kinds=list(kinds) if kinds else list(CorruptionKind))


def _apply(x: np.ndarray, kind: CorruptionKind, param: float, lo: float, hi: float, rng, is_image: bool):
    """x: (N, ...) floats in data units."""
    if kind in SPATIAL_KINDS and not is_image:
        raise ValueError(f"{kind.value} needs image-shaped data (N, H, W), got shape {x.shape}")
    if kind == CorruptionKind.GAUSSIAN_NOISE:
        if param == 0.0:
            return x
        return x + param * (hi - lo) * rng.standard_normal(x.shape)
    if kind == CorruptionKind.IMPULSE_NOISE:
        flip = rng.random(x.shape) < param
        extremes = np.where(rng.random(x.shape) < 0.5, lo, hi)
        return np.where(flip, extremes, x)
    if kind == CorruptionKind.GAUSSIAN_BLUR:
        if param == 0.0:
            return x
        return np.stack([gaussian_filter(img, sigma=param, mode="reflect", truncate=4.0) for img in x])
    mean = x.mean(axis=(1, 2), keepdims=True)
    return mean + param * (x - mean)


def corrupt(dataset: Dataset, spec: CorruptionSpec, seed: int, grid: Optional[CorruptionGrid] = None) -> Dataset:
    """
    Corrupted copy of dataset, deterministic in (seed, kind, severity).

    Raises:
        ValueError: blur/contrast on non-image data
    """
    grid = grid or CorruptionGrid()
    param = grid.parameter(spec)
    rng = np.random.default_rng([seed, KIND_INDEX[spec.kind], spec.severity])
    if dataset.quantized:
        lo, hi = 0.0, float(dataset.levels - 1)
    else:
        lo, hi = dataset.domain
    x = dataset.samples.astype(np.float64)
    out = np.clip(_apply(x, spec.kind, param, lo, hi, rng, dataset.is_image), lo, hi)
    if dataset.quantized:
        out = np.rint(out).astype(np.int64)
    return Dataset(
        samples=out,
        labels=dataset.labels.copy(),
        num_classes=dataset.num_classes,
        quantized=dataset.quantized,
        levels=dataset.levels,
        domain=dataset.domain,
    )


@dataclass
class CorruptionReport:
    clean_accuracy: float
    matrix: Dict[str, List[float]]
    mean_accuracy: Optional[float]
    mean_accuracy_without_noise: Optional[float]
    tables: Dict[str, List[float]]
    rows: List[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "mean_accuracy": self.mean_accuracy,
            "mean_accuracy_without_noise": self.mean_accuracy_without_noise,
            "matrix": self.matrix,
            "severity_tables": self.tables,
        }


def corruption_eval(
    model,
    dataset: Dataset,
    grid: CorruptionGrid,
    cfg,
    tcfg,
    seed: int = 0,
    limit: Optional[int] = None,
) -> CorruptionReport:
    """
    Accuracy for every (kind, severity) cell of the grid.

    The overall mean is the unweighted mean of all cells; the noise-free mean
    drops the gaussian_noise and impulse_noise rows. Spatial kinds are skipped
    (with a warning) on non-image data.
    """
    if len(dataset) == 0:
        raise ValueError("corruption evaluation needs a nonempty dataset")
    if limit is not None and limit < 1:
        raise ValueError(f"limit must be >= 1 or None, got {limit}")
    if limit is not None:
        dataset = dataset.subset(np.arange(min(limit, len(dataset))))
    kinds = list(grid.kinds)
    if not dataset.is_image:
        skipped = [k.value for k in kinds if k in SPATIAL_KINDS]
        if skipped:
            logger.warning(f"skipping spatial corruptions {skipped} on non-image data")
        kinds = [k for k in kinds if k not in SPATIAL_KINDS]

    print("Evaluating clean accuracy")
    clean_accuracy, _, _ = evaluate_accuracy(model, dataset, cfg, tcfg, dequant_seed=seed)

    matrix, rows = {}, []
    n_cells = len(kinds) * N_SEVERITIES
    for kind in kinds:
        accs = []
        for severity in range(1, N_SEVERITIES + 1):
            spec = CorruptionSpec(kind=kind, severity=severity)
            print(f"[{len(rows)+1}/{n_cells}] {kind.value} severity {severity}")
            corrupted = corrupt(dataset, spec, seed, grid)
            acc, _, _ = evaluate_accuracy(model, corrupted, cfg, tcfg, dequant_seed=seed)
            accs.append(acc)
            rows.append({
                "kind": kind.value,
                "severity": severity,
                "parameter": grid.parameter(spec),
                "accuracy": acc,
            })
        matrix[kind.value] = accs

    all_cells = [a for accs in matrix.values() for a in accs]
    quiet_cells = [a for k, accs in matrix.items() if CorruptionKind(k) not in NOISE_KINDS for a in accs]
    return CorruptionReport(
        clean_accuracy=clean_accuracy,
        matrix=matrix,
        mean_accuracy=float(np.mean(all_cells)) if all_cells else None,
        mean_accuracy_without_noise=float(np.mean(quiet_cells)) if quiet_cells else None,
        tables={k.value: list(v) for k, v in grid.tables.items()},
        rows=rows,
    )
