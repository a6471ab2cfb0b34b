import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from app.services.errors import ConeError, GaugeError, SolverError

logger = logging.getLogger(__name__)

ResidualFn = Callable[[np.ndarray], Tuple[np.ndarray, Any]]
OperatorFn = Callable[[np.ndarray, Any], LinearOperator]

MAX_HALVINGS = 30
ARMIJO = 1e-4


@dataclass
class NewtonResult:
    x: np.ndarray
    residual: np.ndarray
    context: Any
    sup_residual: float
    iterations: int
    trace: List[Dict[str, Any]] = field(default_factory=list)


def _sup(r: np.ndarray) -> float:
    return float(np.max(np.abs(r))) if r.size else 0.0


def newton_krylov(
    residual: ResidualFn,
    jacobian: OperatorFn,
    preconditioner: Optional[OperatorFn],
    x0: np.ndarray,
    tol: float,
    max_iter: int = 40,
    gmres_rtol: float = 1e-11,
    gmres_restart: int = 60,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    label: str = "newton",
) -> NewtonResult:
    """
    Inexact Newton with GMRES sub-solves and an admissibility-guarded backtracking line search.

    Args:
        residual: x -> (R(x), context); raises ConeError outside the admissible set
        jacobian: (x, context) -> LinearOperator approximating R'(x)
        preconditioner: (x, context) -> LinearOperator approximating R'(x)^-1
        x0: admissible starting point
        tol: sup-norm target for R
        project: optional gauge projection applied to every Newton step

    Returns:
        NewtonResult with the residual trace

    Raises:
        SolverError: iteration limit or line-search stall (trace attached)
        GaugeError: the linear sub-problem could not be reduced (singular system)
    """
    x = np.array(x0, dtype=float)
    r, context = residual(x)
    sup = _sup(r)
    merit = float(np.linalg.norm(r))
    trace: List[Dict[str, Any]] = [{"iteration": 0, "residual": sup, "step": 0.0}]
    logger.debug(f"{label}: start residual {sup:.3e}")

    iteration = 0
    while sup > tol:
        if iteration >= max_iter:
            logger.error(f"❌ {label}: no convergence after {max_iter} iterations (residual {sup:.3e})")
            raise SolverError(f"{label}: no convergence after {max_iter} iterations", trace)
        iteration += 1

        A = jacobian(x, context)
        M = preconditioner(x, context) if preconditioner is not None else None
        dx, info = gmres(A, -r, rtol=gmres_rtol, atol=0.0, restart=gmres_restart, maxiter=20, M=M)
        if info < 0:
            raise SolverError(f"{label}: GMRES breakdown (info={info})", trace)
        linear = float(np.linalg.norm(A.matvec(dx) + r)) / max(merit, 1e-300)
        if linear > 0.5:
            raise GaugeError(f"{label}: linear sub-problem not reducible (relative residual {linear:.2e})", trace)
        if project is not None:
            dx = project(dx)

        step = 1.0
        for _ in range(MAX_HALVINGS):
            candidate = x + step * dx
            try:
                r_new, context_new = residual(candidate)
            except ConeError as exc:
                logger.warning(f"⚠️ {label}: step {step:.3g} leaves the cone ({exc}); halving")
                step *= 0.5
                continue
            sup_new = _sup(r_new)
            merit_new = float(np.linalg.norm(r_new))
            if merit_new <= (1.0 - ARMIJO * step) * merit or sup_new <= tol:
                break
            logger.warning(f"⚠️ {label}: step {step:.3g} does not decrease the residual; halving")
            step *= 0.5
        else:
            logger.error(f"❌ {label}: line search stalled at residual {sup:.3e}")
            raise SolverError(f"{label}: line search stalled", trace)

        x, r, context, sup, merit = candidate, r_new, context_new, sup_new, merit_new
        trace.append({"iteration": iteration, "residual": sup, "step": step, "gmres_info": int(info)})
        logger.debug(f"{label}: iteration {iteration} residual {sup:.3e} step {step:.3g}")

    return NewtonResult(x=x, residual=r, context=context, sup_residual=sup, iterations=iteration, trace=trace)
