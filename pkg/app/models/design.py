from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class Design(BaseModel):
    """Ordered selection of candidate sensors."""
    d: int = Field(..., ge=1)
    indices: List[int]

    class Config:
        frozen = True

    @model_validator(mode="after")
    def check_indices(self) -> "Design":
        if len(set(self.indices)) != len(self.indices):
            raise ValueError(f"duplicate sensor index in {self.indices}")
        for index in self.indices:
            if not 0 <= index < self.d:
                raise ValueError(f"sensor index {index} out of range for {self.d} candidates")
        return self

    @property
    def r(self) -> int:
        return len(self.indices)

    def key(self) -> tuple:
        """Order-free identity of the sensor set."""
        return tuple(sorted(self.indices))


class GreedySpec(BaseModel):
    """Greedy section of the run configuration."""
    r: int = Field(..., ge=1)
    n_random: int = Field(0, ge=0)  # random designs evaluated as a baseline


class GreedyResult(BaseModel):
    """Greedy selection with its per-step EIG trace."""
    d: int
    r: int
    indices: List[int]
    per_step_eig: List[float]
    eig_eval_kind: str
    seed: Optional[int] = None
    random_design_eigs: List[float] = []
