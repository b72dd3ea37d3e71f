from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field


class MaskRequest(BaseModel):
    spec: str
    height: int = Field(default=128, ge=1)
    width: int = Field(default=128, ge=1)
    seed: int = 0
    include_bits: bool = False


class MaskResponse(BaseModel):
    spec: str
    height: int
    width: int
    n_measured: int
    density: float
    expected_measured: Optional[int] = None
    bits: Optional[List[List[bool]]] = None


class TimeBudgetRequest(BaseModel):
    mask: Optional[str] = None
    n_p: Optional[int] = Field(default=None, ge=0)
    height: int = Field(default=128, ge=1)
    width: int = Field(default=128, ge=1)
    t_p: Optional[float] = Field(default=None, ge=0.0)
    steps: Optional[int] = Field(default=None, ge=0)
    t_d: Optional[float] = Field(default=None, ge=0.0)


class TimeBudgetResponse(BaseModel):
    n_p: int
    t_p: float
    t_d: float
    total: float
    full_scan: float
    speedup: Optional[float] = None  # null when the budget is zero


class ReconstructRequest(BaseModel):
    pixels: List[List[float]]
    mask: str
    method: Literal["linear", "idw", "biharmonic", "diffusion"] = "biharmonic"
    seed: int = 0
    replace_known: bool = False
    evaluate: bool = True


class ReconstructResponse(BaseModel):
    method: str
    mask: str
    n_measured: int
    density: float
    pixels: List[List[float]]
    metrics: Optional[Dict[str, Optional[float]]] = None
    errors: List[str] = []
