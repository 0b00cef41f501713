from typing import Optional

from pydantic import BaseModel, Field


class ReductionSpec(BaseModel):
    """Reduction section: explicit ranks, a single breadth, or an energy threshold."""
    r_M: Optional[int] = Field(None, ge=1)
    r_F: Optional[int] = Field(None, ge=1)
    breadth: Optional[int] = Field(None, ge=1)  # r_M = r_F = breadth
    energy: float = Field(0.99, gt=0, le=1)
    n_samples_as: int = Field(128, ge=1)
    n_samples_pod: int = Field(256, ge=1)

    @property
    def input_rank(self) -> Optional[int]:
        return self.breadth if self.breadth is not None else self.r_M

    @property
    def output_rank(self) -> Optional[int]:
        return self.breadth if self.breadth is not None else self.r_F
