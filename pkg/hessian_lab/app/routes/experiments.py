"""
`run` pipelines: one handler per ExperimentSpec.kind.

Every handler writes its artifacts through a FieldStore; run_experiment adds the
manifest (spec echo, versions, timings, artifact list) and, on failure, a trace file.
"""
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np
import yaml
from pydantic import ValidationError
from tqdm import tqdm

from app.config import get_settings
from app.models.schemas import (
    CurvatureRecord,
    EstimateReport,
    ExperimentSpec,
    Manifest,
    PotentialSpec,
    ResidualReport,
    SolveConfig,
)
from app.services.coupled_solver import (
    CoupledSolution,
    certify,
    estimate_instance,
    estimate_table_checks,
    ma_density,
    ma_mass,
    ma_residual,
    manufactured_problem,
    solve_auxiliary_MA,
    solve_coupled,
)
from app.services.energy import PotentialPath, energy_time_series, variation_refinement
from app.services.errors import ConeError, HessianLabError, SolverError, SpecValidationError
from app.services.field_store import FieldStore, field_statistics, path_statistics
from app.services.mabuchi_geom import curvature_record, solve_geodesic
from app.services.symcone import (
    detG_lower_bound_ratio,
    garding_constant,
    garding_ratio,
    lemma22_matrix,
    newton_margin,
    sample_cone,
    sigma,
)
from app.services.torusfield import (
    TorusBackground,
    TwistForm,
    complex_hessian,
    potential_from_spec,
    random_potential,
    zeros,
)

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ("numpy", "scipy", "pydantic", "pydantic-settings", "click", "PyYAML", "tqdm")
DEFAULT_ESTIMATE_AMPLITUDE = 0.03

ESTIMATE_COLUMNS = list(EstimateReport.model_fields)
CURVATURE_COLUMNS = list(CurvatureRecord.model_fields)
INEQUALITY_COLUMNS = ["sample_id", "n", "k", "sigma_k", "garding_ratio", "lemma22_max", "detG_ratio", "newton_margin"]
INEQUALITY_ATOL = 1e-10
GARDING_RTOL = 1e-12


# ---------- Spec loading ----------

def load_spec(path: Union[str, Path]) -> ExperimentSpec:
    """
    Read a YAML (or JSON) spec file and validate it.

    Raises:
        SpecValidationError: unreadable file or invalid fields, with the offending locations
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise SpecValidationError(f"cannot read spec file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise SpecValidationError(f"spec file {path} must contain a mapping at top level")
    try:
        return ExperimentSpec.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise SpecValidationError(f"invalid spec {path.name}: {problems}") from exc


def output_directory(spec: ExperimentSpec) -> Path:
    return spec.output_dir or get_settings().output_dir / spec.name


def versions() -> Dict[str, str]:
    found = {"python": platform.python_version()}
    for package in VERSIONED_PACKAGES:
        try:
            found[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            found[package] = "unknown"
    return found


# ---------- Builders ----------

def _has_content(spec: Optional[PotentialSpec]) -> bool:
    return spec is not None and bool(spec.modes or spec.random_modes or spec.shift)


def build_twist(spec: ExperimentSpec, background: TorusBackground, rng: np.random.Generator) -> TwistForm:
    """alpha from its spec: zero, c omega, c omega + ddbar beta, or manufactured from phi*."""
    alpha = spec.alpha
    if alpha.kind == "zero":
        return TwistForm.zero(background)
    if alpha.kind == "omega":
        return TwistForm.scaled_omega(background, alpha.scale)
    if alpha.potential is None:
        raise SpecValidationError(f"alpha.kind={alpha.kind} needs alpha.potential")
    potential = potential_from_spec(background, alpha.potential, rng, role="generic")
    if alpha.kind == "hessian":
        return TwistForm(background, alpha.scale * background.omega + complex_hessian(background, potential))
    twist, _ = manufactured_problem(potential.with_data(potential.data, "phi"), spec.solve.k, alpha.scale)
    return twist


def _endpoints(spec: ExperimentSpec, background: TorusBackground, rng: np.random.Generator):
    phi0 = potential_from_spec(background, spec.potential, rng)
    phi1 = potential_from_spec(background, spec.target, rng) if spec.target is not None else zeros(background, "phi")
    return phi0, phi1


# ---------- Worker tasks (top level: picklable) ----------

def _curvature_task(config: SolveConfig, sample_id: int, seed: np.random.SeedSequence) -> CurvatureRecord:
    background = TorusBackground.from_config(config)
    return curvature_record(sample_id, background, config.k, np.random.default_rng(seed))


def _run_pool(fn: Callable, argument_lists: List[list], label: str) -> list:
    """Map fn over the argument lists on the worker pool; results come back in submission order."""
    workers = min(get_settings().workers, max(len(argument_lists[0]) if argument_lists else 1, 1))
    if workers <= 1:
        return [fn(*args) for args in tqdm(list(zip(*argument_lists)), desc=label)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(tqdm(pool.map(fn, *argument_lists), total=len(argument_lists[0]), desc=label))


# ---------- Handlers ----------

def run_solve(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    background = TorusBackground.from_config(spec.solve)
    twist = build_twist(spec, background, rng)
    solution = solve_coupled(spec.solve, twist)
    report = solution.report(spec.solve.tol)
    store.save_field("phi", solution.phi, k=solution.k)
    store.save_field("F", solution.F, k=solution.k)
    store.export_slice_csv("phi_slice", solution.phi)
    store.export_slice_csv("F_slice", solution.F)
    store.write_json("residuals", report)
    return report.success


def run_ma_solve(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    background = TorusBackground.from_config(spec.solve)
    F = potential_from_spec(background, spec.potential, rng, role="F")
    psi = solve_auxiliary_MA(F, spec.solve.k, spec.solve)
    r1 = ma_residual(psi, ma_density(F, spec.solve.k))
    r2 = abs(ma_mass(psi) - background.volume)
    report = ResidualReport(success=max(r1, r2) <= spec.solve.tol, r1=r1, r2=r2, sup_phi=psi.sup_norm, sup_F=F.sup_norm)
    store.save_field("F", F, k=spec.solve.k)
    store.save_field("psi", psi, k=spec.solve.k)
    store.export_slice_csv("psi_slice", psi)
    store.write_json("residuals", report)
    return report.success


def run_estimate_sweep(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    background = TorusBackground.from_config(spec.solve)
    if _has_content(spec.potential):
        base = potential_from_spec(background, spec.potential, rng).data
    else:
        base = random_potential(background, rng, 1.0, max_wave=spec.potential.max_wave).data
    base = base / max(float(np.max(np.abs(base))), 1e-300)
    amplitudes = spec.amplitudes or list(np.linspace(0.0, DEFAULT_ESTIMATE_AMPLITUDE, spec.samples + 1)[1:])
    count = len(amplitudes)
    logger.info(f"🚀 Estimate sweep: {count} manufactured instances (n={spec.solve.n}, k={spec.solve.k})")
    rows = _run_pool(
        estimate_instance,
        [[spec.solve] * count, [base] * count, amplitudes, [spec.epsilon] * count, list(range(count))],
        "estimate",
    )
    store.write_models_csv("estimate", rows, ESTIMATE_COLUMNS)
    checks = estimate_table_checks(rows)
    store.write_json("estimate_checks", checks)
    return bool(checks["success"])


def run_energy_scan(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    background = TorusBackground.from_config(spec.solve)
    k = spec.solve.k
    phi0, phi1 = _endpoints(spec, background, rng)

    def affine(t: float) -> np.ndarray:
        return (1.0 - t) * phi0.data + t * phi1.data

    path = PotentialPath.sample(affine, background, np.linspace(0.0, 1.0, spec.time_steps + 1))
    store.save_path("path", path, k=k)
    store.write_csv("energy", ["t", "mu_k", "dmu_formula", "dmu_difference"], energy_time_series(path, spec.lam, k))
    reports = [
        variation_refinement(affine, background, spec.lam, k, order=order, h0=spec.path_step)
        for order in (1, 2)
    ]
    store.write_json("variations", [r.model_dump() for r in reports])
    return all(r.observed_order is None or r.observed_order >= 1.9 or r.max_residual <= 1e-10 for r in reports)


def run_geodesic(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    background = TorusBackground.from_config(spec.solve)
    phi0, phi1 = _endpoints(spec, background, rng)
    config = spec.solve
    geodesic = solve_geodesic(
        phi0,
        phi1,
        spec.epsilon,
        config.k,
        time_steps=spec.time_steps,
        regularization=spec.regularization,
        tol=config.tol,
        max_newton=config.max_newton,
        fd_step=config.fd_step,
        cone_eps=config.cone_eps,
    )
    store.save_path("geodesic_path", geodesic.path, k=config.k, epsilon=spec.epsilon, regularization=spec.regularization)
    store.write_csv("geodesic", ["t", "energy", "residual"], geodesic.rows())
    store.write_json(
        "geodesic_report",
        {
            "epsilon": geodesic.epsilon,
            "residual": geodesic.residual,
            "converged": geodesic.converged(config.tol),
            "eps_trace": geodesic.eps_trace,
        },
    )
    if not geodesic.converged(config.tol):
        logger.error(f"❌ Geodesic '{spec.name}' did not finish the continuation to eps={spec.epsilon:g}")
        return False
    return True


def run_curvature_sweep(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.samples)
    count = len(seeds)
    logger.info(f"🚀 Curvature sweep: {count} samples (n={spec.solve.n}, k={spec.solve.k})")
    records = _run_pool(_curvature_task, [[spec.solve] * count, list(range(count)), seeds], "curvature")
    store.write_csv("curvature", CURVATURE_COLUMNS, ([getattr(r, c) for c in CURVATURE_COLUMNS] for r in records))
    return all(r.bound_margin >= 0 for r in records)


def run_inequality_sweep(spec: ExperimentSpec, store: FieldStore, rng: np.random.Generator) -> bool:
    n, k = spec.solve.n, spec.solve.k
    lam = sample_cone(n, k, spec.samples, rng)
    mu = sample_cone(n, k, spec.samples, rng)
    rows = []
    if spec.samples:
        ratios = np.asarray(garding_ratio(k, mu, lam), dtype=float).reshape(-1)
        coeff = np.asarray(lemma22_matrix(k, lam), dtype=float)
        off = ~np.eye(n, dtype=bool)
        lemma22_max = np.max(coeff[..., off], axis=-1) if n > 1 else np.zeros(len(lam))
        detg = np.asarray(detG_lower_bound_ratio(k, lam), dtype=float).reshape(-1)
        margins = np.asarray(newton_margin(k, lam), dtype=float).reshape(-1)
        sigmas = np.asarray(sigma(k, lam), dtype=float).reshape(-1)
        rows = [
            (i, n, k, sigmas[i], ratios[i], lemma22_max[i], detg[i], margins[i])
            for i in range(len(lam))
        ]
    store.write_csv("inequality", INEQUALITY_COLUMNS, rows)
    garding_floor = garding_constant(k) * (1.0 - GARDING_RTOL)
    return all(r[5] <= INEQUALITY_ATOL and r[4] >= garding_floor for r in rows)


HANDLERS: Dict[str, Callable[[ExperimentSpec, FieldStore, np.random.Generator], bool]] = {
    "solve": run_solve,
    "ma_solve": run_ma_solve,
    "estimate_sweep": run_estimate_sweep,
    "energy_scan": run_energy_scan,
    "geodesic": run_geodesic,
    "curvature_sweep": run_curvature_sweep,
    "inequality_sweep": run_inequality_sweep,
}


# ---------- Entry ----------

def run_experiment(spec: ExperimentSpec, output_dir: Optional[Path] = None) -> Manifest:
    """
    Execute the pipeline of spec.kind and write the manifest next to its artifacts.

    Raises:
        HessianLabError: after the failure manifest and trace.json are written
    """
    store = FieldStore(output_dir or output_directory(spec))
    rng = np.random.default_rng(spec.seed)
    manifest = Manifest(spec=spec.model_dump(mode="json", by_alias=True), versions=versions())
    logger.info(f"🚀 Running experiment '{spec.name}' ({spec.kind}) into {store.root}")
    start = time.perf_counter()
    try:
        manifest.success = HANDLERS[spec.kind](spec, store, rng)
    except HessianLabError as exc:
        manifest.success = False
        manifest.error = str(exc)
        manifest.timings["total"] = time.perf_counter() - start
        trace = exc.to_dict() if isinstance(exc, (SolverError, ConeError)) else {"error": str(exc)}
        trace["type"] = type(exc).__name__
        store.write_json("trace", trace)
        manifest.artifacts = list(store.artifacts) + ["manifest.json"]
        store.write_json("manifest", manifest)
        logger.error(f"❌ Experiment '{spec.name}' failed: {exc}")
        raise
    manifest.timings["total"] = time.perf_counter() - start
    manifest.artifacts = list(store.artifacts) + ["manifest.json"]
    store.write_json("manifest", manifest)
    marker = "✅" if manifest.success else "⚠️"
    logger.info(f"{marker} Experiment '{spec.name}' finished in {manifest.timings['total']:.2f}s "
                f"({len(manifest.artifacts)} artifacts)")
    return manifest


# ---------- Inspection ----------

def inspect_artifact(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Field statistics of one container, or of a whole run directory together with
    the per-equation residuals recomputed from its manifest.
    """
    path = Path(path)
    if path.is_file():
        loaded, meta = FieldStore.load(path)
        stats = path_statistics(loaded) if isinstance(loaded, PotentialPath) else field_statistics(loaded)
        return {"artifact": path.name, "meta": meta, "statistics": stats}
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise HessianLabError(f"{path} is neither a field container nor a run directory")
    manifest = Manifest.model_validate_json(manifest_file.read_text())
    spec = ExperimentSpec.model_validate(manifest.spec)
    fields = {}
    for container in sorted(path.glob("*.npz")):
        loaded, _ = FieldStore.load(container)
        fields[container.stem] = (
            path_statistics(loaded) if isinstance(loaded, PotentialPath) else field_statistics(loaded)
        )
    summary: Dict[str, Any] = {
        "name": spec.name,
        "kind": spec.kind,
        "success": manifest.success,
        "error": manifest.error,
        "fields": fields,
    }
    k = spec.solve.k
    if spec.kind == "solve" and {"phi", "F"} <= set(fields):
        background = TorusBackground.from_config(spec.solve)
        twist = build_twist(spec, background, np.random.default_rng(spec.seed))
        phi, _ = FieldStore.load(path / "phi.npz")
        F, _ = FieldStore.load(path / "F.npz")
        solution = CoupledSolution(phi=phi, F=F, twist=twist, k=k, r1=0.0, r2=0.0, alpha_bar=0.0)
        report = certify(solution)
        summary["residuals"] = {"r1": report.r1, "r2": report.r2, "r_scalar": report.r_scalar, "alpha_bar": report.alpha_bar}
    elif spec.kind == "ma_solve" and {"psi", "F"} <= set(fields):
        psi, _ = FieldStore.load(path / "psi.npz")
        F, _ = FieldStore.load(path / "F.npz")
        summary["residuals"] = {
            "ma": ma_residual(psi, ma_density(F, k)),
            "mass_error": abs(ma_mass(psi) - psi.background.volume),
        }
    return summary
