from enum import Enum
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator


class ModelKind(str, Enum):
    LINEAR = "linear"
    ELLIPTIC = "elliptic"
    ADR = "adr"


class SourceKind(str, Enum):
    BUMP = "bump"
    MANUFACTURED = "manufactured"
    ZERO = "zero"


class SensorGridSpec(BaseModel):
    """Rectangular lattice of candidate sensors."""
    x0: float
    y0: float
    dx: float = Field(..., ge=0)
    dy: float = Field(..., ge=0)
    count_x: int = Field(..., ge=1)
    count_y: int = Field(..., ge=1)

    def points(self) -> List[Tuple[float, float]]:
        return [
            (self.x0 + i * self.dx, self.y0 + j * self.dy)
            for j in range(self.count_y)
            for i in range(self.count_x)
        ]


class ModelSpec(BaseModel):
    """Model section of the run configuration."""
    kind: ModelKind
    # Linear model
    matrix: Optional[List[List[float]]] = None
    offset: Optional[List[float]] = None
    # PDE models
    k: float = Field(0.01, gt=0)
    v0: float = 30.0
    source: SourceKind = SourceKind.BUMP
    reaction: bool = True
    newton_tol: float = Field(1e-10, gt=0)
    newton_max_iter: int = Field(50, ge=1)
    max_halvings: int = Field(10, ge=0)
    sensors: Optional[Union[SensorGridSpec, List[Tuple[float, float]]]] = None

    @model_validator(mode="after")
    def check_kind_fields(self) -> "ModelSpec":
        if self.kind == ModelKind.LINEAR:
            if not self.matrix:
                raise ValueError("linear model requires 'matrix'")
            width = len(self.matrix[0])
            if any(len(row) != width for row in self.matrix):
                raise ValueError("'matrix' rows must have equal length")
            if self.offset is not None and len(self.offset) != len(self.matrix):
                raise ValueError("'offset' length must equal the number of matrix rows")
        elif self.sensors is None:
            raise ValueError(f"{self.kind.value} model requires 'sensors'")
        return self

    def sensor_points(self) -> List[Tuple[float, float]]:
        if isinstance(self.sensors, SensorGridSpec):
            return self.sensors.points()
        return list(self.sensors or [])
