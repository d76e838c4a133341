"""
Configuration for GAPA runs.

Defaults come from the environment (a local .env file is honoured), the
pipeline configuration itself is a pydantic model so JSON config files and
CLI overrides are validated in one place.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

load_dotenv()

DEFAULT_JITTER = float(os.getenv("GAPA_JITTER", "1e-6"))
DEFAULT_K = int(os.getenv("GAPA_K", "50"))
DEFAULT_M = int(os.getenv("GAPA_M", "20000"))
DEFAULT_SEED = int(os.getenv("GAPA_SEED", "0"))
DEFAULT_N_PROBE = int(os.getenv("GAPA_N_PROBE", "8"))
DEFAULT_PAIR_BUDGET = int(os.getenv("GAPA_PAIR_BUDGET", "1000000"))
DEFAULT_MC_SAMPLES = int(os.getenv("GAPA_MC_SAMPLES", "512"))
DEFAULT_TOP_K = int(os.getenv("GAPA_TOP_K", "512"))
DEFAULT_LOG_LEVEL = os.getenv("GAPA_LOG_LEVEL", "INFO")

STAGES = ("gen-toy", "cache", "induce", "attach", "infer", "eval", "sweep")


def configure_logging(level: Optional[str] = None) -> None:
    """Install a root handler; library modules only ever call getLogger."""
    logging.basicConfig(
        level=getattr(logging, (level or DEFAULT_LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def stage_seed(root: int, stage: str, counter: int = 0) -> int:
    """Derive an independent seed for one pipeline stage from the root seed."""
    stage_id = STAGES.index(stage) if stage in STAGES else sum(map(ord, stage))
    state = np.random.SeedSequence([int(root), stage_id, int(counter)]).generate_state(1)
    return int(state[0])


class PipelineConfig(BaseModel):
    """Everything one cache -> induce -> attach -> infer -> eval run needs."""

    model_config = ConfigDict(extra="forbid")

    network_path: Path
    out_dir: Path = Path("gapa_out")
    train_path: Optional[Path] = None
    test_path: Optional[Path] = None
    ood_path: Optional[Path] = None
    dataset_id: str = ""
    # shifted test sets scored one by one at eval, e.g. {"rotated_45": "rotated_45.csv"}
    shift_paths: Dict[str, Path] = Field(default_factory=dict)

    gapa_layers: List[int] = Field(default_factory=list)
    m: int = Field(DEFAULT_M, ge=1)
    k: int = Field(DEFAULT_K, ge=1)
    method: str = "kmeans++"
    index_kind: str = "exact"
    n_lists: Optional[int] = Field(None, ge=1)
    n_probe: int = Field(DEFAULT_N_PROBE, ge=1)
    jitter: float = DEFAULT_JITTER
    pair_budget: int = Field(DEFAULT_PAIR_BUDGET, ge=1)
    max_iters: int = Field(100, ge=1)

    head: str = "laplace"
    variant: str = "a"
    mc_samples: int = Field(DEFAULT_MC_SAMPLES, ge=1)
    top_k: int = Field(DEFAULT_TOP_K, ge=1)

    noise_head_hidden: int = Field(0, ge=0)
    noise_head_epochs: int = Field(2000, ge=1)
    noise_head_lr: float = Field(0.05, gt=0)
    noise_head_feature_layer: Optional[int] = Field(None, ge=0)

    seed: int = DEFAULT_SEED

    @field_validator("jitter")
    @classmethod
    def _jitter_positive(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("jitter must be > 0")
        return value

    @field_validator("variant")
    @classmethod
    def _known_variant(cls, value: str) -> str:
        value = value.lower()
        if value not in ("a", "b"):
            raise ValueError("variant must be 'a' or 'b'")
        return value

    @field_validator("method")
    @classmethod
    def _known_method(cls, value: str) -> str:
        if value not in ("kmeans++", "fps", "random"):
            raise ValueError("method must be 'kmeans++', 'fps' or 'random'")
        return value

    @field_validator("index_kind")
    @classmethod
    def _known_index(cls, value: str) -> str:
        if value not in ("exact", "ivf"):
            raise ValueError("index_kind must be 'exact' or 'ivf'")
        return value

    @field_validator("head")
    @classmethod
    def _known_head(cls, value: str) -> str:
        if value not in ("laplace", "mc", "noise"):
            raise ValueError("head must be 'laplace', 'mc' or 'noise'")
        return value

    @model_validator(mode="after")
    def _m_covers_k(self) -> "PipelineConfig":
        if self.m < self.k:
            raise ValueError(f"m ({self.m}) must be >= k ({self.k})")
        return self
