from enum import Enum
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, field_validator


class InnerMode(str, Enum):
    FRESH = "fresh"
    SHARED = "shared-bank"


class EvaluatorKind(str, Enum):
    TRUE = "true"
    SURROGATE = "surrogate"
    CLOSED_FORM = "closed_form"


class NoiseModel(BaseModel):
    """Independent Gaussian sensor noise; a scalar sigma applies to every candidate."""
    sigma: Union[float, List[float]]

    @field_validator("sigma")
    @classmethod
    def check_positive(cls, value):
        values = value if isinstance(value, list) else [value]
        if not values or any(not s > 0 for s in values):
            raise ValueError("sigma must be positive")
        return value

    def sigma_vector(self, d: int) -> np.ndarray:
        if isinstance(self.sigma, list):
            if len(self.sigma) != d:
                raise ValueError(f"noise sigma has length {len(self.sigma)}, expected {d}")
            return np.asarray(self.sigma, dtype=float)
        return np.full(d, float(self.sigma))


class EigSpec(BaseModel):
    """EIG section of the run configuration."""
    n_out: int = Field(200, ge=1)
    n_in: int = Field(1000, ge=1)
    inner_mode: InnerMode = InnerMode.FRESH
    evaluator: EvaluatorKind = EvaluatorKind.TRUE
    design: Optional[List[int]] = None  # None selects every candidate


class EigEstimate(BaseModel):
    """DLMC estimate and its sample accounting."""
    value: float
    stderr: float
    n_out: int
    n_in: int
    design_indices: List[int]
    seed: int
    evaluator_kind: EvaluatorKind
    per_outer_terms: List[float] = Field(default=[], exclude=True)
    pde_solves: int = 0
