from enum import Enum
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, Field


class Grid(BaseModel):
    """Uniform node grid on [0, lx] x [0, ly]; nodes are row-major (x fastest)."""
    nx: int = Field(..., ge=2)
    ny: int = Field(..., ge=2)
    lx: float = Field(1.0, gt=0)
    ly: float = Field(1.0, gt=0)

    class Config:
        frozen = True

    @property
    def hx(self) -> float:
        return self.lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.ly / (self.ny - 1)

    @property
    def n(self) -> int:
        return self.nx * self.ny

    def coordinates(self) -> np.ndarray:
        """Node coordinates as an (n, 2) array in node order."""
        x = np.linspace(0.0, self.lx, self.nx)
        y = np.linspace(0.0, self.ly, self.ny)
        xx, yy = np.meshgrid(x, y)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros((self.ny, self.nx), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        return mask.ravel()

    def nearest_node(self, x: float, y: float) -> int:
        """Index of the node closest to (x, y); the point must lie in the closed domain."""
        if not (0.0 <= x <= self.lx and 0.0 <= y <= self.ly):
            raise ValueError(f"point ({x}, {y}) lies outside the domain [0, {self.lx}] x [0, {self.ly}]")
        i = int(round(x / self.hx))
        j = int(round(y / self.hy))
        return j * self.nx + i


class PriorKind(str, Enum):
    FIELD = "field"
    DENSE = "dense"


class PriorSpec(BaseModel):
    """Prior section of the run configuration."""
    kind: PriorKind = PriorKind.FIELD
    gamma: float = Field(0.1, ge=0)
    delta: float = Field(1.0, gt=0)
    mean: Union[float, List[float]] = 0.0
    covariance: Optional[List[List[float]]] = None  # dense priors only
