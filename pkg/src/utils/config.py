"""
Experiment configuration.

Precedence (lowest to highest): field defaults, environment (.env via
python-dotenv: SBGC_OUT_DIR, SBGC_SEED), the JSON config file, CLI flags.
"""

import hashlib
import json
import logging
import math
import os
from enum import Enum
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.diffusion.score_models import MlpConfig
from src.diffusion.sde import SdeSpec
from src.likelihood.prob_flow import SolverCfg, TraceCfg
from src.robustness.attacks import AttackCfg
from src.robustness.corruptions import CorruptionGrid
from src.training.dsm import TrainCfg
from src.utils.io import read_json

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "results"


class DataKind(str, Enum):
    GMM = "gmm"
    TOYIMAGE = "toyimage"


class DataCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DataKind = DataKind.GMM
    num_classes: int = Field(default=3, ge=1)
    dim: int = Field(default=2, ge=1)
    # (K, D) or (K, J, D); None places one mode per class on a circle
    modes: Optional[list] = None
    mode_radius: float = Field(default=3.0, gt=0)
    scale: float = Field(default=1.0, gt=0)
    height: int = Field(default=8, ge=2)
    width: int = Field(default=8, ge=2)
    levels: int = Field(default=256, ge=2, le=256)
    noise_amplitude: float = Field(default=0.1, ge=0)
    n_train_per_class: int = Field(default=1000, ge=0)
    n_test_per_class: int = Field(default=100, ge=0)


class InterpolationCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_pairs: int = Field(default=100, ge=1)
    grid_points: int = Field(default=24, ge=3)


class ConvergenceCfg(BaseModel):
    model_config = ConfigDict(frozen=True)

    probe_counts: List[int] = Field(default_factory=lambda: [1, 2, 5, 10, 30])

    @field_validator("probe_counts")
    @classmethod
    def check_counts(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError(f"probe counts must be a nonempty list of integers >= 1, got {v}")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = Field(default=0, ge=0)
    out_dir: str = DEFAULT_OUT_DIR
    sde: SdeSpec = Field(default_factory=SdeSpec)
    data: DataCfg = Field(default_factory=DataCfg)
    model: MlpConfig = Field(default_factory=MlpConfig)
    train: TrainCfg = Field(default_factory=TrainCfg)
    solver: SolverCfg = Field(default_factory=SolverCfg)
    trace: TraceCfg = Field(default_factory=TraceCfg)
    # robustness sweeps use fewer probes than reported likelihoods
    robustness_probes: int = Field(default=10, ge=1)
    attack: AttackCfg = Field(default_factory=AttackCfg)
    corruption: CorruptionGrid = Field(default_factory=CorruptionGrid)
    interpolation: InterpolationCfg = Field(default_factory=InterpolationCfg)
    convergence: ConvergenceCfg = Field(default_factory=ConvergenceCfg)
    # cap on evaluated samples for classify/attack/corrupt-eval (None: all)
    eval_limit: Optional[int] = Field(default=None, ge=1)


def default_modes(num_classes: int, dim: int, radius: float) -> np.ndarray:
    """One mode per class: evenly on a circle in the first two coordinates (a line for D=1)."""
    modes = np.zeros((num_classes, dim))
    if dim == 1:
        modes[:, 0] = radius * (np.arange(num_classes) - (num_classes - 1) / 2.0)
        return modes
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    modes[:, 0] = radius * np.cos(angles)
    modes[:, 1] = radius * np.sin(angles)
    return modes


def env_defaults() -> dict:
    """Values taken from the environment (after loading .env)."""
    load_dotenv()
    out = {}
    if os.getenv("SBGC_OUT_DIR"):
        out["out_dir"] = os.getenv("SBGC_OUT_DIR")
    if os.getenv("SBGC_SEED"):
        out["seed"] = int(os.getenv("SBGC_SEED"))
    return out


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path=None, overrides: Optional[dict] = None, use_env: bool = True) -> ExperimentConfig:
    """
    Resolve the experiment configuration.

    Args:
        path: optional JSON config file (any subset of ExperimentConfig fields)
        overrides: nested dict applied last (CLI flags)
        use_env: read SBGC_OUT_DIR / SBGC_SEED defaults
    """
    data = env_defaults() if use_env else {}
    if path is not None:
        data = _merge(data, read_json(path))
        logger.info(f"Loaded config from {path}")
    if overrides:
        data = _merge(data, overrides)
    return ExperimentConfig.model_validate(data)


def cli_overrides(seed=None, out_dir=None, sde=None, trace=None, probes=None) -> dict:
    """Nested override dict from the global CLI flags (None entries are skipped)."""
    out = {}
    if seed is not None:
        out["seed"] = seed
    if out_dir is not None:
        out["out_dir"] = out_dir
    if sde is not None:
        out["sde"] = {"kind": sde}
    trace_update = {}
    if trace is not None:
        trace_update["mode"] = trace
    if probes is not None:
        trace_update["n_probes"] = probes
    if trace_update:
        out["trace"] = trace_update
    return out


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON dump; changes iff any field changes."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def substream_seed(root: int, label: str, offset: int = 0) -> int:
    """Labeled child seed of the root seed (same inputs, same seed)."""
    label_code = int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:4], "little")
    return int(np.random.SeedSequence([root, label_code, offset]).generate_state(1)[0])
