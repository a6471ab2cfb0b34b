from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import get_settings

ExperimentKind = Literal[
    "solve",
    "ma_solve",
    "estimate_sweep",
    "energy_scan",
    "geodesic",
    "curvature_sweep",
    "inequality_sweep",
]

RANDOMIZED_KINDS = {"estimate_sweep", "energy_scan", "geodesic", "curvature_sweep", "inequality_sweep"}

SuiteName = Literal["cone", "garding", "lemma22", "variations", "curvature", "geodesic", "solver", "estimate"]


# ---------- Configuration ----------

class SolveConfig(BaseModel):
    """Discretization, tolerances and continuation schedule of one torus problem"""
    n: int = Field(2, description="Complex dimension", ge=1)
    k: int = Field(1, description="Hessian degree, 1 <= k <= n", ge=1)
    N: int = Field(16, description="Grid points per real axis", ge=4, le=256)
    collapse_imag: bool = Field(False, description="Sample every Im z_j axis with one point (fields independent of Im z)")
    omega: Optional[List[List[float]]] = Field(None, description="Real part of the constant background metric (default identity)")
    omega_imag: Optional[List[List[float]]] = Field(None, description="Imaginary part of the background metric")
    tol: float = Field(1e-9, description="Sup-norm residual target", gt=0.0)
    max_newton: int = Field(40, description="Newton iterations per continuation step", ge=1)
    continuation_steps: int = Field(4, description="Continuation steps in the data parameter", ge=1)
    gmres_rtol: float = Field(1e-11, description="Relative tolerance of the Krylov sub-solves", gt=0.0)
    gmres_restart: int = Field(60, description="GMRES restart length", ge=5)
    fd_step: float = Field(1e-7, description="Finite-difference step of Jacobian-vector products", gt=0.0)
    cone_eps: float = Field(1e-10, description="Admissibility margin of the line search", ge=0.0)

    @model_validator(mode="after")
    def check_dimensions(self) -> "SolveConfig":
        if self.k > self.n:
            raise ValueError(f"k={self.k} must not exceed n={self.n}")
        for name in ("omega", "omega_imag"):
            matrix = getattr(self, name)
            if matrix is not None and (len(matrix) != self.n or any(len(row) != self.n for row in matrix)):
                raise ValueError(f"{name} must be an {self.n}x{self.n} matrix")
        return self


class ModeSpec(BaseModel):
    """One Fourier mode  coefficient * cos(2 pi <wave, x> + phase)  on the real coordinates (x1, y1, x2, y2, ...)"""
    coefficient: float
    wave: List[int] = Field(..., description="Integer wave vector, one entry per real axis")
    phase: float = 0.0


class PotentialSpec(BaseModel):
    """Band-limited potential: explicit modes plus optional seeded random modes"""
    modes: List[ModeSpec] = Field(default_factory=list)
    random_modes: int = Field(0, description="Number of random modes added with the experiment seed", ge=0)
    amplitude: float = Field(0.0, description="Sup-norm scale of the random part", ge=0.0)
    max_wave: int = Field(1, description="Largest |wave| entry of random modes", ge=1)
    shift: float = Field(0.0, description="Constant added to the potential")


class AlphaSpec(BaseModel):
    """Twisting (1,1)-form"""
    kind: Literal["zero", "omega", "hessian", "manufactured"] = "zero"
    scale: float = Field(0.0, description="c in alpha = c*omega (+ the exact part)")
    potential: Optional[PotentialSpec] = Field(
        None, description="beta for kind=hessian (alpha += ddbar beta), phi* for kind=manufactured"
    )


class ExperimentSpec(BaseModel):
    """One experiment spec file"""
    model_config = ConfigDict(populate_by_name=True)

    name: str = Field("experiment", min_length=1)
    kind: ExperimentKind
    solve: SolveConfig = Field(default_factory=SolveConfig)
    alpha: AlphaSpec = Field(default_factory=AlphaSpec)
    lam: float = Field(0.0, alias="lambda", description="lambda of the Hessian Mabuchi energy")
    epsilon: float = Field(0.1, description="epsilon of the estimate harness / final geodesic regularization", gt=0.0)
    samples: int = Field(100, description="Sample count of randomized sweeps", ge=0)
    amplitudes: List[float] = Field(default_factory=list, description="Instance amplitudes of family sweeps")
    potential: PotentialSpec = Field(default_factory=PotentialSpec, description="Base potential / first endpoint")
    target: Optional[PotentialSpec] = Field(None, description="Second geodesic endpoint")
    time_steps: int = Field(8, description="Time intervals of paths and geodesics", ge=2)
    path_step: float = Field(0.05, description="Coarsest path step of variation checks", gt=0.0)
    regularization: Literal["elliptic", "source"] = "elliptic"
    seed: Optional[int] = Field(None, description="RNG seed (mandatory for randomized kinds)")
    output_dir: Optional[Path] = Field(None, description="Artifact directory (default: settings.output_dir/name)")

    @field_validator("amplitudes")
    @classmethod
    def check_amplitudes(cls, value: List[float]) -> List[float]:
        if any(a < 0 for a in value):
            raise ValueError("amplitudes must be non-negative")
        return value

    @model_validator(mode="after")
    def check_spec(self) -> "ExperimentSpec":
        max_n = get_settings().max_dimension
        if not 1 <= self.solve.k <= self.solve.n <= max_n:
            raise ValueError(f"need 1 <= k <= n <= {max_n}, got n={self.solve.n} k={self.solve.k}")
        if self.kind in RANDOMIZED_KINDS and self.seed is None:
            raise ValueError(f"kind '{self.kind}' is randomized: a seed is mandatory")
        return self


# ---------- Reports ----------

class EnergyReport(BaseModel):
    """Hessian Mabuchi energy and its decomposition"""
    mu_k: float
    entropy_term: float
    j_term: float
    twist_term: float
    lam: float = Field(..., description="lambda used in the definition")
    A_F: float = Field(..., description="integral of exp(nF/k) sqrt(F^2+1)")
    entropy: float = Field(..., description="integral of exp(nF/k) |F|")
    sup_phi: float
    sup_F: float


class VariationReport(BaseModel):
    """Formula-vs-difference residuals under path-step refinement"""
    order: Literal[1, 2]
    steps: List[float]
    residuals: List[float]
    max_residual: float
    relative_residuals: List[float] = Field(default_factory=list)
    max_relative_residual: Optional[float] = None
    observed_order: Optional[float] = None


class ResidualReport(BaseModel):
    """Residual certificate of a coupled (or auxiliary MA) solution"""
    success: bool
    r1: float
    r2: float = 0.0
    r_scalar: Optional[float] = Field(None, description="Residual of the generalized scalar curvature form")
    alpha_bar: float = 0.0
    sup_phi: float = 0.0
    sup_F: float = 0.0
    iterations: int = 0
    continuation_trace: List[Dict[str, Any]] = Field(default_factory=list)
    error: Optional[str] = None


class EstimateReport(BaseModel):
    """One row of the estimate table (column order is the CSV order)"""
    instance_id: int
    n: int
    k: int
    N: int
    entropy: float
    A_F: float
    supF: float
    infF: float
    supPhi: float
    lemma2_max: float
    lambda_used: float
    barrier_bound: float
    barrier_ok: bool
    detG_min: float
    detG_ok: bool


class CurvatureRecord(BaseModel):
    """One row of the curvature sweep table"""
    sample_id: int
    n: int
    k: int
    value: float
    bound_margin: float


class SuiteReport(BaseModel):
    """Machine-readable pass/fail summary of one verify suite"""
    suite: str
    success: bool
    samples: int = 0
    message: Optional[str] = None
    statistics: Dict[str, Any] = Field(default_factory=dict)
    failures: List[Dict[str, Any]] = Field(default_factory=list)
    error: Optional[str] = None


class Manifest(BaseModel):
    """Spec echo, versions and timings written next to every artifact"""
    spec: Dict[str, Any]
    versions: Dict[str, str]
    timings: Dict[str, float] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=datetime.now)
    success: bool = True
    error: Optional[str] = None
