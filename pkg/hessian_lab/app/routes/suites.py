"""
`verify` property suites. Every suite returns a SuiteReport; failing samples are
serialized into `failures` so they can be replayed.
"""
import logging
import math
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.models.schemas import SolveConfig, SuiteReport
from app.services.coupled_solver import (
    detG_gate,
    estimate_instance,
    estimate_table_checks,
    linear_oracle,
    ma_mass,
    manufactured_problem,
    manufactured_solution,
    solve_auxiliary_MA,
    solve_coupled,
)
from app.services.energy import classical_k_energy, mu_k, mu_k_twisted, mu_k_twisted_line_integral, variation_refinement
from app.services.errors import HessianLabError
from app.services.mabuchi_geom import (
    GeodesicPath,
    classical_curvature,
    curvature_bruteforce,
    curvature_form,
    curvature_record,
    curvature_sample,
    curvature_scale,
    solve_geodesic,
)
from app.services.symcone import (
    balanced_detG_ratio,
    detG_lower_bound_ratio,
    empirical_detG_constant,
    garding_constant,
    garding_ratio,
    lemma22_coefficient,
    lemma22_matrix,
    newton_check,
    sample_cone,
    sigma_derivatives,
    to_exact,
)
from app.services.torusfield import (
    PotentialField,
    TorusBackground,
    TwistForm,
    complex_hessian,
    potential_from_modes,
    random_modes,
    random_potential,
)

logger = logging.getLogger(__name__)

MAX_FAILURES = 20
CONE_MAX_N = 6
DETG_MAX_N = 4
NEAR_ZERO = 1e-9
VARIATION_PAIRS = ((2, 1), (2, 2), (3, 2), (3, 3))
MIN_ORDER = 1.9
FLOOR = 1e-11
CURVATURE_RTOL = 1e-10
BRUTEFORCE_RTOL = 1e-4
CLASSICAL_RTOL = 1e-8
SOLVER_TOL = 1e-11
ESTIMATE_PAIRS = ((2, 1), (2, 2))
ESTIMATE_GRIDS = (16, 32)

# full-size sweeps; `verify --samples` asks for a reduced run
DEFAULT_SAMPLES = {
    "cone": 100_000,
    "garding": 100_000,
    "lemma22": 100_000,
    "detG": 1_000_000,
    "variations": 1,
    "curvature": 1000,
    "geodesic": 1,
    "solver": 2,
    "estimate": 12,
}


def _pairs(max_n: int, min_n: int = 1) -> Iterator[Tuple[int, int]]:
    for n in range(min_n, max_n + 1):
        for k in range(1, n + 1):
            yield n, k


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def _fail(failures: List[Dict], **record) -> None:
    if len(failures) < MAX_FAILURES:
        failures.append(record)


def _finish(suite: str, samples: int, statistics: Dict, failures: List[Dict]) -> SuiteReport:
    success = not failures
    marker = "✅" if success else "❌"
    logger.info(f"{marker} Suite '{suite}': {'pass' if success else 'FAIL'} ({samples} samples, {len(failures)} failures)")
    return SuiteReport(suite=suite, success=success, samples=samples, statistics=statistics, failures=failures)


# ---------- Cone and inequality suites ----------

def suite_cone(samples: int, seed: int) -> SuiteReport:
    """sigma_{k-1,i} > 0 and the det G lower bound on Gamma_k; Newton inequalities on arbitrary real vectors."""
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for n, k in _pairs(CONE_MAX_N):
        rng = _rng(seed, n, k)
        lam = sample_cone(n, k, samples, rng)
        d = np.asarray(sigma_derivatives(k, lam), dtype=float)
        for row, i in np.argwhere(d <= 0):
            _fail(failures, check="sigma_{k-1,i} > 0", n=n, k=k, i=int(i), lam=lam[row].tolist())
        ratio = np.asarray(detG_lower_bound_ratio(k, lam), dtype=float)
        if np.min(ratio) <= 0:
            _fail(failures, check="detG bound positive", n=n, k=k, lam=lam[int(np.argmin(ratio))].tolist())
        if k == n and np.max(np.abs(ratio - 1.0)) > 1e-12:
            _fail(failures, check="detG bound equals 1 at k = n", n=n, k=k, deviation=float(np.max(np.abs(ratio - 1.0))))
        arbitrary = rng.normal(size=(samples, n)) * 2.0
        for i in range(n):
            for j in range(i + 1, n):
                if not newton_check(k, i, j, arbitrary):
                    _fail(failures, check="newton", n=n, k=k, i=i, j=j)
        statistics[f"n={n},k={k}"] = {"min_sigma_derivative": float(np.min(d)), "min_detG_ratio": float(np.min(ratio))}
    return _finish("cone", samples, statistics, failures)


def suite_detG(samples: int, seed: int) -> SuiteReport:
    """
    det(G) sigma_k^(n/k) over random Gamma_k spectra: positive, never below the balanced
    spectrum, identically 1 at k = n; manufactured fields pass the gate with the sweep constant.
    """
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for n, k in _pairs(DETG_MAX_N):
        sampled = empirical_detG_constant(n, k, samples, _rng(seed, n, k))
        balanced = balanced_detG_ratio(n, k)
        constant = min(sampled, balanced)
        entry = {"sampled_min": sampled, "balanced": balanced, "constant": constant}
        if sampled <= 0:
            _fail(failures, check="detG bound positive", n=n, k=k, sampled_min=sampled)
        if sampled < balanced * (1.0 - 1e-12):
            _fail(failures, check="balanced spectrum minimizes detG", n=n, k=k, sampled_min=sampled, balanced=balanced)
        if k == n and abs(sampled - 1.0) > 1e-12:
            _fail(failures, check="detG bound equals 1 at k = n", n=n, k=k, sampled_min=sampled)
        if n <= 3:
            bg = TorusBackground(n=n, N=8, collapse_imag=True)
            phi_star = random_potential(bg, _rng(seed, n, k, 1), 0.02, role="phi")
            field_min, ok = detG_gate(manufactured_solution(phi_star, k), constant)
            entry["field_min"] = field_min
            if not ok:
                _fail(failures, check="detG field gate", n=n, k=k, field_min=field_min, constant=constant)
        statistics[f"n={n},k={k}"] = entry
    return _finish("detG", samples, statistics, failures)


def suite_garding(samples: int, seed: int) -> SuiteReport:
    """Pairing >= garding_constant(k) on random Gamma_k pairs; empirical minimum compared across two seeds."""
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for n, k in _pairs(CONE_MAX_N):
        minima = []
        for offset in (0, 1):
            rng = _rng(seed + offset, n, k)
            mu = sample_cone(n, k, samples, rng)
            lam = sample_cone(n, k, samples, rng)
            ratios = np.asarray(garding_ratio(k, mu, lam), dtype=float).reshape(-1)
            worst = int(np.argmin(ratios))
            if ratios[worst] < garding_constant(k) * (1.0 - 1e-12):
                _fail(failures, check="garding", n=n, k=k, mu=mu[worst].tolist(), lam=lam[worst].tolist())
            minima.append(float(ratios[worst]))
        spread = abs(minima[0] - minima[1]) / minima[0]
        statistics[f"n={n},k={k}"] = {
            "constant": garding_constant(k),
            "empirical_min": minima[0],
            "empirical_min_next_seed": minima[1],
            "seed_spread": spread,
            "stable": spread <= 0.02,
        }
    return _finish("garding", samples, statistics, failures)


def suite_lemma22(samples: int, seed: int) -> SuiteReport:
    """Every off-diagonal coefficient <= 0; near-zero values re-verified in exact rationals."""
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for n, k in _pairs(CONE_MAX_N, min_n=2):
        lam = sample_cone(n, k, samples, _rng(seed, n, k))
        coeff = np.asarray(lemma22_matrix(k, lam), dtype=float)
        coeff[..., np.arange(n), np.arange(n)] = -np.inf
        suspicious = np.argwhere(coeff > -NEAR_ZERO)
        for row, i, j in suspicious:
            exact = lemma22_coefficient(k, int(i), int(j), to_exact(lam[row]))
            if exact > 0:
                _fail(failures, check="lemma22", n=n, k=k, i=int(i), j=int(j), lam=lam[row].tolist(), exact=str(exact))
        statistics[f"n={n},k={k}"] = {"max_coefficient": float(np.max(coeff)), "near_zero": int(len(suspicious))}
    return _finish("lemma22", samples, statistics, failures)


# ---------- Energy ----------

def suite_variations(samples: int, seed: int) -> SuiteReport:
    """
    Refinement study of both variation formulas along random paths, the classical
    K-energy oracle at k = n and the line-integral oracle of the twisted energy.
    """
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for n, k in VARIATION_PAIRS:
        bg = TorusBackground(n=n, N=16, collapse_imag=True)
        for sample in range(samples):
            rng = _rng(seed, n, k, sample)
            a = random_potential(bg, rng, 0.02, role="phi").data
            b = random_potential(bg, rng, 0.02, role="phi").data
            lam = float(rng.uniform(-1.0, 1.0))

            def path_fn(t: float, a=a, b=b) -> np.ndarray:
                return a + t * b + 0.5 * t * t * a * b

            key = f"n={n},k={k},sample={sample}"
            entry: Dict[str, float] = {}
            for order in (1, 2):
                report = variation_refinement(path_fn, bg, lam, k, order=order)
                entry[f"order{order}"] = report.observed_order
                entry[f"residual{order}"] = report.max_residual
                entry[f"relative_residual{order}"] = report.max_relative_residual
                if report.max_residual > FLOOR and (report.observed_order is None or report.observed_order < MIN_ORDER):
                    _fail(failures, check=f"variation order {order}", n=n, k=k, sample=sample,
                          steps=report.steps, residuals=report.residuals)
            phi = PotentialField(bg, a, "phi")
            if k == n:
                ours = mu_k(phi, 0.0, k).mu_k
                classical = classical_k_energy(phi)
                deviation = abs(ours - classical) / max(abs(classical), 1e-300)
                entry["classical_deviation"] = deviation
                if deviation > 1e-8 and abs(ours - classical) > 1e-14:
                    _fail(failures, check="classical K-energy", n=n, k=k, sample=sample, ours=ours, classical=classical)
            twist = TwistForm(bg, 0.5 * bg.omega + complex_hessian(bg, b))
            closed = mu_k_twisted(phi, twist, k).mu_k
            line = mu_k_twisted_line_integral(phi, twist, k)
            entry["line_integral_deviation"] = abs(closed - line)
            if abs(closed - line) > 1e-6 * max(1.0, abs(closed)):
                _fail(failures, check="twisted line integral", n=n, k=k, sample=sample, closed=closed, line=line)
            statistics[key] = entry
    return _finish("variations", samples * len(VARIATION_PAIRS), statistics, failures)


# ---------- Geometry ----------

def _curvature_background(n: int) -> TorusBackground:
    # full 2n-axis grids where affordable so frame components are genuinely complex
    return TorusBackground(n=n, N=8, collapse_imag=False) if n <= 2 else TorusBackground(n=n, N=16, collapse_imag=True)


def suite_curvature(samples: int, seed: int) -> SuiteReport:
    """Non-positivity sweep, brute-force agreement under step refinement, and the k = n classical oracle."""
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for n, k in _pairs(3):
        bg = _curvature_background(n)
        rng = _rng(seed, n, k)
        records = [curvature_record(i, bg, k, rng, CURVATURE_RTOL) for i in range(samples)]
        for record in records:
            if record.bound_margin < 0:
                _fail(failures, check="curvature <= 0", **record.model_dump())
        entry: Dict[str, float] = {"max_value": max((r.value for r in records), default=0.0)}

        if samples:
            u, X, Y = curvature_sample(bg, k, _rng(seed, n, k, 1), amplitude=0.01)
            closed = curvature_form(u, X, Y, k)
            scale = curvature_scale(u, X, Y)
            coarse, fine = (curvature_bruteforce(u, X, Y, k, h) for h in (2e-3, 1e-3))
            errors = [abs(coarse - closed) / scale, abs(fine - closed) / scale]
            # second-order differences: one Richardson step removes the leading error
            extrapolated = abs((4.0 * fine - coarse) / 3.0 - closed) / scale
            entry["bruteforce_error"] = extrapolated
            if errors[1] > 1e-13:
                entry["bruteforce_order"] = math.log2(errors[0] / errors[1])
            if extrapolated > BRUTEFORCE_RTOL:
                _fail(failures, check="bruteforce agreement", n=n, k=k, closed=closed, errors=errors)
            if k == n:
                classical = classical_curvature(u, X, Y)
                entry["classical_deviation"] = abs(closed - classical) / scale
                if abs(closed - classical) > CLASSICAL_RTOL * scale:
                    _fail(failures, check="classical curvature", n=n, k=k, closed=closed, classical=classical)
        statistics[f"n={n},k={k}"] = entry
    return _finish("curvature", samples * 6, statistics, failures)


def _energy_drift(geodesic: GeodesicPath) -> float:
    energies = geodesic.energies()
    return (max(energies) - min(energies)) / max(abs(float(np.mean(energies))), 1e-300)


def suite_geodesic(samples: int, seed: int) -> SuiteReport:
    """Exact constant/affine geodesics, energy drift under time refinement, monotone continuation residuals."""
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    tol = 1e-10
    for n, k in ((2, 1), (2, 2)):
        bg = TorusBackground(n=n, N=8, collapse_imag=True)
        for sample in range(samples):
            rng = _rng(seed, n, k, sample)
            phi0 = random_potential(bg, rng, 0.02, role="phi")
            phi1 = random_potential(bg, rng, 0.02, role="phi")
            entry: Dict[str, object] = {}
            for label, end in (("constant", phi0), ("affine", phi0.with_data(phi0.data + 0.3))):
                geodesic = solve_geodesic(phi0, end, 1e-3, k, time_steps=6, tol=tol)
                deviation = max(
                    float(np.max(np.abs(s.data - ((1 - t) * phi0.data + t * end.data))))
                    for s, t in zip(geodesic.path.samples, geodesic.path.times)
                )
                entry[f"{label}_deviation"] = deviation
                if deviation > 1e-8:
                    _fail(failures, check=f"{label} geodesic exact", n=n, k=k, sample=sample, deviation=deviation)
            drifts = []
            for steps in (6, 12):
                geodesic = solve_geodesic(phi0, phi1, 1e-2, k, time_steps=steps, tol=tol)
                drifts.append(_energy_drift(geodesic))
                residuals = [e["residual"] for e in geodesic.eps_trace]
                if any(b > a * (1.0 + 1e-6) + tol for a, b in zip(residuals, residuals[1:])):
                    _fail(failures, check="monotone continuation residual", n=n, k=k, sample=sample, residuals=residuals)
            entry["energy_drift"] = drifts
            statistics[f"n={n},k={k},sample={sample}"] = entry
    return _finish("geodesic", samples * 2, statistics, failures)


# ---------- Solver ----------

def _config(n: int, k: int, N: int = 16) -> SolveConfig:
    return SolveConfig(n=n, k=k, N=N, collapse_imag=True, tol=SOLVER_TOL)


def suite_solver(samples: int, seed: int) -> SuiteReport:
    """Manufactured recovery, the k = 1 spectral oracle, gauge invariance and auxiliary MA mass conservation."""
    statistics: Dict[str, Dict] = {}
    failures: List[Dict] = []
    for sample in range(samples):
        for n, k in ((2, 1), (2, 2)):
            config = _config(n, k)
            bg = TorusBackground.from_config(config)
            rng = _rng(seed, n, k, sample)
            phi_star = random_potential(bg, rng, 0.02, role="phi")
            twist, F_star = manufactured_problem(phi_star, k, scale=0.5)
            solution = solve_coupled(config, twist)
            error = max(
                float(np.max(np.abs(solution.phi.data - (phi_star.data - phi_star.sup)))),
                float(np.max(np.abs(solution.F.data - F_star))),
            )
            shifted = solve_coupled(config, twist, seed_phi=solution.phi.with_data(solution.phi.data + 0.7), seed_F=solution.F)
            gauge = float(np.max(np.abs(shifted.phi.data - solution.phi.data)))
            entry = {"manufactured_error": error, "gauge_deviation": gauge}
            if error > 1e-8:
                _fail(failures, check="manufactured recovery", n=n, k=k, sample=sample, error=error)
            if gauge > 1e-10:
                _fail(failures, check="gauge invariance", n=n, k=k, sample=sample, deviation=gauge)

            psi = solve_auxiliary_MA(solution.F, k, config)
            mass = abs(ma_mass(psi) - bg.volume)
            entry["ma_mass_error"] = mass
            if mass > 1e-10:
                _fail(failures, check="MA mass", n=n, k=k, sample=sample, error=mass)
            statistics[f"n={n},k={k},sample={sample}"] = entry

        config = _config(2, 1)
        bg = TorusBackground.from_config(config)
        beta = random_potential(bg, _rng(seed, 99, sample), 0.05).data
        solution = solve_coupled(config, TwistForm(bg, complex_hessian(bg, beta)))
        phi_ref, F_ref = linear_oracle(bg, beta)
        oracle = max(float(np.max(np.abs(solution.phi.data - phi_ref))), float(np.max(np.abs(solution.F.data - F_ref))))
        statistics[f"linear_oracle,sample={sample}"] = {"error": oracle}
        if oracle > 1e-10:
            _fail(failures, check="k = 1 linear oracle", sample=sample, error=oracle)

    if samples:
        bg = TorusBackground(n=2, N=16, collapse_imag=True)
        psi = solve_auxiliary_MA(PotentialField(bg, np.zeros(bg.shape), "F"), 1, _config(2, 1))
        statistics["ma_zero_density"] = {"sup_psi": psi.sup_norm}
        if psi.sup_norm > 1e-10:
            _fail(failures, check="MA with F = 0", sup_psi=psi.sup_norm)
    return _finish("solver", samples, statistics, failures)


def _estimate_base(bg: TorusBackground, modes: list) -> np.ndarray:
    data = potential_from_modes(bg, modes).data
    return data / max(float(np.max(np.abs(data))), 1e-300)


def suite_estimate(samples: int, seed: int) -> SuiteReport:
    """
    Manufactured family of increasing amplitude through the estimate harness, every instance
    on two grids; the upper, lower and det G table checks must hold.
    """
    rows = []
    for n, k in ESTIMATE_PAIRS:
        modes = random_modes(TorusBackground(n=n, N=ESTIMATE_GRIDS[0], collapse_imag=True), _rng(seed, n, k), 4)
        for N in ESTIMATE_GRIDS:
            config = _config(n, k, N)
            base = _estimate_base(TorusBackground.from_config(config), modes)
            rows += [
                estimate_instance(config, base, float(a), 0.1, i)
                for i, a in enumerate(np.linspace(0.0, 0.03, samples + 1)[1:])
            ]
    checks = estimate_table_checks(rows)
    failures: List[Dict] = []
    if not checks["success"]:
        _fail(failures, check="estimate table", **checks)
    return _finish("estimate", samples, {**checks, "rows": [r.model_dump() for r in rows]}, failures)


SUITES: Dict[str, Callable[[int, int], SuiteReport]] = {
    "cone": suite_cone,
    "detG": suite_detG,
    "garding": suite_garding,
    "lemma22": suite_lemma22,
    "variations": suite_variations,
    "curvature": suite_curvature,
    "geodesic": suite_geodesic,
    "solver": suite_solver,
    "estimate": suite_estimate,
}


def run_suite(name: str, samples: Optional[int] = None, seed: int = 0) -> SuiteReport:
    """
    Run one property suite.

    Args:
        name: suite name (see SUITES)
        samples: per-configuration sample count (suite default when None; 0 gives a vacuous pass)
        seed: base RNG seed

    Returns:
        SuiteReport; solver-level exceptions are caught and reported with success=False
    """
    if name not in SUITES:
        return SuiteReport(suite=name, success=False, error=f"unknown suite '{name}'")
    samples = DEFAULT_SAMPLES[name] if samples is None else samples
    if samples == 0:
        logger.info(f"⚠️ Suite '{name}': no samples")
        return SuiteReport(suite=name, success=True, samples=0, message="no samples")
    logger.info(f"🔍 Running suite '{name}' ({samples} samples, seed {seed})")
    try:
        return SUITES[name](samples, seed)
    except HessianLabError as exc:
        logger.error(f"❌ Suite '{name}' aborted: {exc}")
        trace = exc.to_dict() if hasattr(exc, "to_dict") else {"error": str(exc)}
        return SuiteReport(suite=name, success=False, samples=samples, error=str(exc), failures=[trace])
