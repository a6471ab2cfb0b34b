from typing import Any, Dict, List, Optional, Sequence


class HessianLabError(Exception):
    """Base class for every error raised by the lab."""


class DomainError(HessianLabError, ValueError):
    """Argument outside the domain of an operation (k, indices, sample sets)."""


class ConeError(DomainError):
    """
    Admissibility violation: some eigenvalue vector left the Gamma_k cone.

    Carries the worst grid point so the failing state can be replayed.
    """

    def __init__(
        self,
        message: str,
        index: Optional[Sequence[int]] = None,
        eigenvalues: Optional[Sequence[float]] = None,
        cone_class: Optional[int] = None,
    ) -> None:
        super().__init__(message)
        self.index = tuple(index) if index is not None else None
        self.eigenvalues = [float(v) for v in eigenvalues] if eigenvalues is not None else None
        self.cone_class = cone_class

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": str(self),
            "index": self.index,
            "eigenvalues": self.eigenvalues,
            "cone_class": self.cone_class,
        }


class GridMismatchError(HessianLabError, ValueError):
    """Fields living on different backgrounds or grids."""


class SolverError(HessianLabError, RuntimeError):
    """Non-convergence of an iterative solve; `trace` holds the residual history."""

    def __init__(self, message: str, trace: Optional[List[Dict[str, Any]]] = None) -> None:
        super().__init__(message)
        self.trace = list(trace or [])

    def to_dict(self) -> Dict[str, Any]:
        return {"error": str(self), "trace": self.trace}


class GaugeError(SolverError):
    """Singular linear system: a gauge (additive constant) was left unfixed."""


class SpecValidationError(HessianLabError, ValueError):
    """Experiment spec failed validation."""
