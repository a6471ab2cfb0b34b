"""
Newton-continuation solver for the coupled system

    omega_phi^k ^ omega^(n-k) = e^F omega^n
    Delta_G F = -alpha_bar + tr_G alpha

the auxiliary Monge-Ampère equation and the C^0-estimate harness.
"""
import logging
import math
import statistics
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse.linalg import LinearOperator
from scipy.special import comb

from app.models.schemas import EstimateReport, ResidualReport, SolveConfig
from app.services.energy import entropy_A
from app.services.errors import SolverError
from app.services.newton import newton_krylov
from app.services.symcone import balanced_detG_ratio, empirical_detG_constant
from app.services.torusfield import (
    HessianState,
    PotentialField,
    TorusBackground,
    TwistForm,
    alpha_bar,
    complex_hessian,
    evaluate_state,
    generalized_scalar_curvature,
    integrate,
    laplace_G,
    mean,
    solve_laplace_omega,
    state_from_array,
    trace_G,
)

logger = logging.getLogger(__name__)

MAX_CONTINUATION_RETRIES = 6
NEWTON_TOL_FACTOR = 0.1


@dataclass
class CoupledSolution:
    """Converged pair (phi, F), sup phi = 0, with its residual certificate."""

    phi: PotentialField
    F: PotentialField
    twist: TwistForm
    k: int
    r1: float
    r2: float
    alpha_bar: float
    iterations: int = 0
    continuation_trace: List[Dict[str, Any]] = field(default_factory=list)
    basin_seed: str = "zero"

    @property
    def background(self) -> TorusBackground:
        return self.phi.background

    @property
    def residuals(self) -> Tuple[float, float]:
        return self.r1, self.r2

    def report(self, tol: Optional[float] = None) -> ResidualReport:
        certificate = certify(self)
        ok = tol is None or max(certificate.r1, certificate.r2) <= tol
        certificate.success = ok
        certificate.iterations = self.iterations
        certificate.continuation_trace = self.continuation_trace
        if not ok:
            certificate.error = f"residuals ({certificate.r1:.3e}, {certificate.r2:.3e}) exceed tol {tol:.1e}"
        return certificate


# ---------- Residuals ----------

def _project(v: np.ndarray) -> np.ndarray:
    """Remove the constant mode (the gauge of phi)."""
    return v - math.fsum(np.ravel(v)) / v.size


def coupled_residual(
    background: TorusBackground, k: int, twist: TwistForm, phi: np.ndarray, F: np.ndarray, eps: float = 0.0
) -> Tuple[np.ndarray, np.ndarray, HessianState, float]:
    """(log ratio - F, Delta_G F + alpha_bar - tr_G alpha) with alpha_bar recomputed from phi."""
    state = state_from_array(background, phi, k, eps)
    abar = alpha_bar(state, twist)
    e1 = state.F - F
    e2 = laplace_G(state, F) + abar - trace_G(state, twist.values)
    return e1, e2, state, abar


def certify(solution: CoupledSolution) -> ResidualReport:
    """Re-evaluate every residual from a fresh state assembly."""
    bg = solution.background
    state = evaluate_state(PotentialField(bg, solution.phi.data.copy(), "phi"), solution.k)
    abar = alpha_bar(state, solution.twist)
    F = solution.F.data
    r1 = float(np.max(np.abs(state.ratio - np.exp(F))))
    tr_alpha = trace_G(state, solution.twist.values)
    r2 = float(np.max(np.abs(laplace_G(state, F) + abar - tr_alpha)))
    scalar = generalized_scalar_curvature(state) + tr_alpha - abar
    return ResidualReport(
        success=True,
        r1=r1,
        r2=r2,
        r_scalar=float(np.max(np.abs(scalar))),
        alpha_bar=abar,
        sup_phi=solution.phi.sup_norm,
        sup_F=solution.F.sup_norm,
    )


# ---------- Coupled solve ----------

def _newton_coupled(
    background: TorusBackground,
    config: SolveConfig,
    twist: TwistForm,
    phi0: np.ndarray,
    F0: np.ndarray,
    label: str,
):
    shape = background.shape
    M = background.size
    k, n = config.k, background.n
    scale = k / n

    def split(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return x[:M].reshape(shape), x[M:].reshape(shape)

    def residual(x: np.ndarray):
        phi, F = split(x)
        e1, e2, state, abar = coupled_residual(background, k, twist, phi, F, config.cone_eps)
        return np.concatenate([e1.ravel(), e2.ravel()]), (state, e2, F)

    def jacobian(x: np.ndarray, context) -> LinearOperator:
        state, e2_base, F = context
        phi = state.phi

        def matvec(v: np.ndarray) -> np.ndarray:
            dphi = _project(v[:M]).reshape(shape)
            dF = v[M:].reshape(shape)
            j1 = laplace_G(state, dphi) - dF
            j2 = laplace_G(state, dF)
            size = float(np.max(np.abs(dphi)))
            if size > 0:
                h = config.fd_step * max(1.0, float(np.max(np.abs(phi)))) / size
                _, e2_shift, _, _ = coupled_residual(background, k, twist, phi + h * dphi, F)
                j2 = j2 + (e2_shift - e2_base) / h
            return np.concatenate([j1.ravel(), j2.ravel()])

        return LinearOperator((2 * M, 2 * M), matvec=matvec, dtype=float)

    def preconditioner(x: np.ndarray, context) -> LinearOperator:
        def matvec(v: np.ndarray) -> np.ndarray:
            a = v[:M].reshape(shape)
            b = v[M:].reshape(shape)
            dF = solve_laplace_omega(background, b, scale) - mean(background, a)
            dphi = solve_laplace_omega(background, a + dF, scale)
            return np.concatenate([dphi.ravel(), dF.ravel()])

        return LinearOperator((2 * M, 2 * M), matvec=matvec, dtype=float)

    def project(dx: np.ndarray) -> np.ndarray:
        out = dx.copy()
        out[:M] = _project(out[:M])
        return out

    x0 = np.concatenate([np.ravel(phi0), np.ravel(F0)])
    result = newton_krylov(
        residual,
        jacobian,
        preconditioner,
        x0,
        tol=config.tol * NEWTON_TOL_FACTOR,
        max_iter=config.max_newton,
        gmres_rtol=config.gmres_rtol,
        gmres_restart=config.gmres_restart,
        project=project,
        label=label,
    )
    phi, F = split(result.x)
    return phi.copy(), F.copy(), result


def solve_coupled(
    config: SolveConfig,
    twist: TwistForm,
    seed_phi: Optional[PotentialField] = None,
    seed_F: Optional[PotentialField] = None,
) -> CoupledSolution:
    """
    Solve the coupled system by continuation in alpha_s = s * alpha, s in (0, 1].

    Args:
        config: grid, (n, k) and tolerances
        twist: the (1,1)-form alpha
        seed_phi, seed_F: optional starting pair (default: the s = 0 solution (0, 0))

    Returns:
        CoupledSolution with sup phi = 0 and certified residuals

    Raises:
        SolverError: continuation stalled (trace attached)
        ConeError: inadmissible seed
    """
    bg = twist.background
    if bg.n != config.n:
        raise SolverError(f"twist lives on n={bg.n}, config has n={config.n}")
    phi = seed_phi.data.copy() if seed_phi is not None else np.zeros(bg.shape)
    F = seed_F.data.copy() if seed_F is not None else state_from_array(bg, phi, config.k).F
    basin = "seed" if seed_phi is not None else "zero"
    logger.info(f"🚀 Coupled solve n={config.n} k={config.k} N={config.N} (seed: {basin})")

    trace: List[Dict[str, Any]] = []
    iterations = 0
    s, ds = 0.0, 1.0 / config.continuation_steps
    if seed_phi is not None:
        s, ds = 1.0, 0.0
    retries = 0
    while True:
        target = min(1.0, s + ds) if ds > 0 else 1.0
        try:
            phi_new, F_new, result = _newton_coupled(
                bg, config, twist.scaled(target), phi, F, label=f"coupled s={target:.4g}"
            )
        except SolverError as exc:
            trace.append({"s": target, "error": str(exc), "trace": exc.trace})
            retries += 1
            if ds == 0.0 or retries > MAX_CONTINUATION_RETRIES:
                logger.error(f"❌ Continuation stalled at s={s:.4g}")
                raise SolverError(f"continuation stalled at s={s:.4g}", trace) from exc
            ds *= 0.5
            logger.warning(f"⚠️ Continuation step failed at s={target:.4g}; retrying with ds={ds:.3g}")
            continue
        phi, F, s = phi_new, F_new, target
        iterations += result.iterations
        trace.append({"s": s, "residual": result.sup_residual, "iterations": result.iterations})
        if s >= 1.0:
            break

    phi = phi - np.max(phi)
    solution = CoupledSolution(
        phi=PotentialField(bg, phi, "phi"),
        F=PotentialField(bg, F, "F"),
        twist=twist,
        k=config.k,
        r1=0.0,
        r2=0.0,
        alpha_bar=0.0,
        iterations=iterations,
        continuation_trace=trace,
        basin_seed=basin,
    )
    certificate = certify(solution)
    solution.r1, solution.r2, solution.alpha_bar = certificate.r1, certificate.r2, certificate.alpha_bar
    if max(solution.r1, solution.r2) > config.tol:
        logger.error(f"❌ Certificate failed: r1={solution.r1:.3e} r2={solution.r2:.3e}")
        raise SolverError(f"certified residuals ({solution.r1:.3e}, {solution.r2:.3e}) exceed tol", trace)
    logger.info(f"✅ Coupled solve converged: r1={solution.r1:.2e} r2={solution.r2:.2e} ({iterations} Newton steps)")
    return solution


# ---------- Exact solutions ----------

def manufactured_problem(phi_star: PotentialField, k: int, scale: float = 0.0) -> Tuple[TwistForm, np.ndarray]:
    """
    alpha* = c omega + ddbar(F* + c phi*) with F* = log ratio(phi*); (phi*, F*) then solves the system.
    """
    bg = phi_star.background
    F_star = evaluate_state(phi_star, k).F
    alpha = scale * bg.omega + complex_hessian(bg, F_star + scale * phi_star.data)
    return TwistForm(bg, alpha), F_star


def manufactured_solution(phi_star: PotentialField, k: int, scale: float = 0.0) -> CoupledSolution:
    """The manufactured pair itself, sup-normalized and certified (no solve)."""
    twist, F_star = manufactured_problem(phi_star, k, scale)
    bg = phi_star.background
    solution = CoupledSolution(
        phi=PotentialField(bg, phi_star.data - phi_star.sup, "phi"),
        F=PotentialField(bg, F_star, "F"),
        twist=twist,
        k=k,
        r1=0.0,
        r2=0.0,
        alpha_bar=0.0,
        basin_seed="manufactured",
    )
    certificate = certify(solution)
    solution.r1, solution.r2, solution.alpha_bar = certificate.r1, certificate.r2, certificate.alpha_bar
    return solution


def linear_oracle(background: TorusBackground, beta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    k = 1, alpha = ddbar beta: F = beta - log mean(e^beta), Delta_omega phi = n (e^F - 1); sup phi = 0.
    """
    F = beta - math.log(mean(background, np.exp(beta)))
    phi = solve_laplace_omega(background, background.n * (np.exp(F) - 1.0))
    return phi - np.max(phi), F


# ---------- Auxiliary Monge-Ampère ----------

def ma_density(F: PotentialField, k: int) -> np.ndarray:
    """omega_psi^n / omega^n = V e^(nF/k) sqrt(F^2+1) / A_F (integrates to V)."""
    bg = F.background
    n = bg.n
    terms = entropy_A(F, n, k)
    log_density = (n / k) * F.data + 0.5 * np.log1p(F.data ** 2) + math.log(bg.volume) - terms.log_A_F
    return np.exp(log_density)


def ma_residual(psi: PotentialField, density: np.ndarray) -> float:
    state = evaluate_state(psi, psi.background.n)
    return float(np.max(np.abs(state.ratio - density)))


def ma_mass(psi: PotentialField) -> float:
    """int omega_psi^n (equals V for every admissible psi)."""
    state = evaluate_state(psi, psi.background.n)
    return integrate(psi.background, state.ratio)


def solve_auxiliary_MA(F: PotentialField, k: int, config: Optional[SolveConfig] = None) -> PotentialField:
    """
    psi with omega_psi^n = V e^(nF/k) Phi(F) / A_F omega^n, omega_psi > 0 and sup psi = 0.

    Newton on log det(omega^-1 omega_psi) - log rho_s with the constant-coefficient
    Delta_omega inverse as preconditioner; continuation rho_s = (1 - s) + s rho.
    """
    bg = F.background
    n = bg.n
    config = config or SolveConfig(n=n, k=min(k, n), N=bg.N, collapse_imag=bg.collapse_imag)
    density = ma_density(F, k)
    shape, M = bg.shape, bg.size
    logger.info(f"🚀 Auxiliary Monge-Ampère solve n={n} (density range {density.min():.3g}..{density.max():.3g})")

    def run(psi0: np.ndarray, rho: np.ndarray, label: str):
        log_rho = np.log(rho)

        def residual(x: np.ndarray):
            state = state_from_array(bg, x.reshape(shape), n, config.cone_eps)
            return (state.F - log_rho).ravel(), state

        def jacobian(x: np.ndarray, state: HessianState) -> LinearOperator:
            return LinearOperator(
                (M, M), matvec=lambda v: np.ravel(laplace_G(state, _project(v).reshape(shape))), dtype=float
            )

        def preconditioner(x: np.ndarray, state: HessianState) -> LinearOperator:
            return LinearOperator(
                (M, M), matvec=lambda v: np.ravel(solve_laplace_omega(bg, v.reshape(shape))), dtype=float
            )

        return newton_krylov(
            residual,
            jacobian,
            preconditioner,
            psi0.ravel(),
            tol=config.tol * NEWTON_TOL_FACTOR,
            max_iter=config.max_newton,
            gmres_rtol=config.gmres_rtol,
            gmres_restart=config.gmres_restart,
            project=_project,
            label=label,
        )

    psi = np.zeros(shape)
    trace: List[Dict[str, Any]] = []
    s, ds, retries = 0.0, 1.0 / config.continuation_steps, 0
    while s < 1.0:
        target = min(1.0, s + ds)
        try:
            result = run(psi, (1.0 - target) + target * density, f"MA s={target:.4g}")
        except SolverError as exc:
            trace.append({"s": target, "error": str(exc)})
            retries += 1
            if retries > MAX_CONTINUATION_RETRIES:
                logger.error(f"❌ Monge-Ampère continuation stalled at s={s:.4g}")
                raise SolverError(f"Monge-Ampère continuation stalled at s={s:.4g}", trace) from exc
            ds *= 0.5
            continue
        psi, s = result.x.reshape(shape), target
        trace.append({"s": s, "residual": result.sup_residual, "iterations": result.iterations})

    psi = psi - np.max(psi)
    logger.info(f"✅ Monge-Ampère solve converged ({len(trace)} continuation steps)")
    return PotentialField(bg, psi, "psi")


# ---------- Estimate harness ----------

DETG_SWEEP_SAMPLES = 100_000
DETG_RTOL = 1e-10
ENTROPY_CAP = 1.0
LEMMA2_BOUND = 10.0
REFINEMENT_RTOL = 0.1


def detG_field_check(solution: CoupledSolution) -> float:
    """min over the grid of det(G) sigma_k^(n/k)."""
    state = evaluate_state(solution.phi, solution.k)
    n, k = state.n, state.k
    return float(np.min(state.det_G * state.sigma_k ** (n / k)))


@lru_cache(maxsize=None)
def detG_sweep_constant(n: int, k: int, samples: int = DETG_SWEEP_SAMPLES, seed: int = 0) -> float:
    """Sweep minimum of det(G) sigma_k^(n/k), anchored at the balanced spectrum where the infimum sits."""
    sampled = empirical_detG_constant(n, k, samples, np.random.default_rng([seed, n, k]))
    return min(sampled, balanced_detG_ratio(n, k))


def detG_gate(solution: CoupledSolution, constant: Optional[float] = None, rtol: float = DETG_RTOL) -> Tuple[float, bool]:
    """(grid minimum, minimum >= constant (1 - rtol)); constant defaults to detG_sweep_constant."""
    n, k = solution.background.n, solution.k
    constant = detG_sweep_constant(n, k) if constant is None else constant
    value = detG_field_check(solution)
    ok = value >= constant * (1.0 - rtol)
    if not ok:
        logger.error(f"❌ det G bound violated: grid min {value:.12g} < sweep constant {constant:.12g}")
    return value, ok


def barrier_bound(solution: CoupledSolution) -> float:
    """
    inf F >= -k log((A k - alpha_bar) / c) - A sup|phi|, A = 1 + sup|alpha|_omega,
    c = n m_G^(1/n) C(n, k)^(-1/k), m_G = detG_field_check.
    """
    n, k = solution.background.n, solution.k
    A = 1.0 + solution.twist.sup_norm()
    c = n * detG_field_check(solution) ** (1.0 / n) * comb(n, k) ** (-1.0 / k)
    arg = A * k - solution.alpha_bar
    if arg <= 0:
        return -math.inf
    return -k * math.log(arg / c) - A * solution.phi.sup_norm


def estimate_harness(
    solution: CoupledSolution, epsilon: float, instance_id: int = 0, config: Optional[SolveConfig] = None
) -> EstimateReport:
    """
    Solve the auxiliary Monge-Ampère equation and report f = F + eps psi - lam phi,
    lam = 10 + sup|alpha|_omega, with the entropy quantities and sup-norms.
    """
    bg = solution.background
    n, k = bg.n, solution.k
    psi = solve_auxiliary_MA(solution.F, k, config)
    lam = 10.0 + solution.twist.sup_norm()
    f = solution.F.data + epsilon * psi.data - lam * solution.phi.data
    terms = entropy_A(solution.F, n, k)
    bound = barrier_bound(solution)
    detG_min, detG_ok = detG_gate(solution)
    report = EstimateReport(
        instance_id=instance_id,
        n=n,
        k=k,
        N=bg.N,
        entropy=terms.entropy,
        A_F=terms.A_F,
        supF=solution.F.sup,
        infF=solution.F.inf,
        supPhi=solution.phi.sup_norm,
        lemma2_max=float(np.max(f)),
        lambda_used=lam,
        barrier_bound=bound,
        barrier_ok=solution.F.inf >= bound - 1e-8,
        detG_min=detG_min,
        detG_ok=detG_ok,
    )
    logger.info(
        f"🔍 Estimate instance {instance_id}: entropy={report.entropy:.4g} lemma2_max={report.lemma2_max:.4g} "
        f"infF={report.infF:.4g} bound={bound:.4g}"
    )
    return report


def estimate_instance(
    config: SolveConfig, base: np.ndarray, amplitude: float, epsilon: float, instance_id: int, solve: bool = True
) -> EstimateReport:
    """One member of the manufactured family phi* = amplitude * base (top level: picklable for worker pools)."""
    bg = TorusBackground.from_config(config)
    phi_star = PotentialField(bg, amplitude * base, "phi")
    if solve:
        twist, _ = manufactured_problem(phi_star, config.k)
        solution = solve_coupled(config, twist)
    else:
        solution = manufactured_solution(phi_star, config.k)
    return estimate_harness(solution, epsilon, instance_id, config)


def estimate_table_checks(
    rows: Sequence[EstimateReport],
    entropy_cap: float = ENTROPY_CAP,
    lemma2_bound: float = LEMMA2_BOUND,
    refinement_rtol: float = REFINEMENT_RTOL,
) -> Dict[str, Any]:
    """
    (a) every row with entropy <= entropy_cap has lemma2_max <= lemma2_bound, and an instance
        present at several N has lemma2_max growing by at most refinement_rtol from the
        coarsest to the finest grid;
    (b) every barrier holds and inf F stays finite on the bounded-sup|phi| half;
    (c) every row passes the det G gate.
    """
    if not rows:
        return {"success": True, "message": "no samples"}
    capped = [r for r in rows if r.entropy <= entropy_cap]
    bounded_ok = bool(capped) and all(r.lemma2_max <= lemma2_bound for r in capped)

    by_instance: Dict[Tuple[int, int, int], List[EstimateReport]] = {}
    for r in capped:
        by_instance.setdefault((r.n, r.k, r.instance_id), []).append(r)
    growth = []
    for group in by_instance.values():
        if len({r.N for r in group}) < 2:
            continue
        coarse = min(group, key=lambda r: r.N)
        fine = max(group, key=lambda r: r.N)
        growth.append((fine.lemma2_max - coarse.lemma2_max) / max(1.0, abs(coarse.lemma2_max)))
    refinement_ok = all(g <= refinement_rtol for g in growth)

    phi_cap = statistics.median(r.supPhi for r in rows)
    inf_bounded = [r.infF for r in rows if r.supPhi <= phi_cap]
    lower_ok = all(r.barrier_ok for r in rows) and all(math.isfinite(v) for v in inf_bounded)
    detG_ok = all(r.detG_ok for r in rows)
    upper_ok = bounded_ok and refinement_ok
    return {
        "success": upper_ok and lower_ok and detG_ok,
        "entropy_cap": entropy_cap,
        "capped_rows": len(capped),
        "lemma2_max_capped": max((r.lemma2_max for r in capped), default=None),
        "lemma2_bound": lemma2_bound,
        "max_refinement_growth": max(growth, default=None),
        "upper_ok": upper_ok,
        "min_infF_bounded": min(inf_bounded),
        "lower_ok": lower_ok,
        "min_detG": min(r.detG_min for r in rows),
        "detG_ok": detG_ok,
    }
