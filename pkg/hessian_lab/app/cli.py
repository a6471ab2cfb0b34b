import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Optional, Tuple

import click

from app.config import get_settings
from app.routes.experiments import inspect_artifact, load_spec, output_directory, run_experiment
from app.routes.suites import SUITES, run_suite
from app.services.errors import HessianLabError, SpecValidationError
from app.services.field_store import FieldStore
from app.services.symcone import spectrum_summary

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_SPEC = 2


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, default=str))


@click.group()
def cli() -> None:
    """Numerical laboratory for the coupled complex Hessian system on flat tori."""


# ---------- run ----------

@cli.command()
@click.argument("spec_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Artifact directory (overrides output_dir in SPEC_FILE and HESSIAN_LAB_OUTPUT_DIR)")
@click.pass_context
def run(ctx: click.Context, spec_file: Path, output_dir: Optional[Path]) -> None:
    """Execute the experiment described by SPEC_FILE (YAML or JSON)."""
    try:
        spec = load_spec(spec_file)
    except SpecValidationError as exc:
        logger.error(f"❌ {exc}")
        click.echo(f"❌ {exc}", err=True)
        ctx.exit(EXIT_SPEC)
    target = output_dir or output_directory(spec)
    try:
        manifest = run_experiment(spec, target)
    except SpecValidationError as exc:
        click.echo(f"❌ {exc}", err=True)
        ctx.exit(EXIT_SPEC)
    except HessianLabError as exc:
        click.echo(f"❌ {spec.name} failed: {exc} (trace: {target / 'trace.json'})", err=True)
        ctx.exit(EXIT_FAILURE)
    status = "✅ success" if manifest.success else "❌ checks failed"
    click.echo(f"{status}: {len(manifest.artifacts)} artifacts in {target}")
    if not manifest.success:
        ctx.exit(EXIT_FAILURE)


# ---------- verify ----------

@cli.command()
@click.argument("suite", type=click.Choice(sorted(SUITES)))
@click.option("--samples", type=click.IntRange(min=0), default=None, help="Samples per configuration (suite default if omitted)")
@click.option("--seed", type=int, default=0, show_default=True, help="Base RNG seed")
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Where the JSON report is written (default: HESSIAN_LAB_OUTPUT_DIR/verify)")
@click.pass_context
def verify(ctx: click.Context, suite: str, samples: Optional[int], seed: int, output_dir: Optional[Path]) -> None:
    """Run one property SUITE and write a machine-readable pass/fail report."""
    report = run_suite(suite, samples, seed)
    store = FieldStore(output_dir or get_settings().output_dir / "verify")
    path = store.write_json(f"verify_{suite}", report)
    summary = {"suite": report.suite, "success": report.success, "samples": report.samples, "report": str(path)}
    if report.message:
        summary["message"] = report.message
    if report.error:
        summary["error"] = report.error
    _echo_json(summary)
    if not report.success:
        ctx.exit(EXIT_FAILURE)


# ---------- inspect ----------

@cli.command()
@click.argument("artifact", type=click.Path(exists=True, path_type=Path))
@click.pass_context
def inspect(ctx: click.Context, artifact: Path) -> None:
    """Print field statistics (and per-equation residuals for a run directory)."""
    try:
        _echo_json(inspect_artifact(artifact))
    except HessianLabError as exc:
        click.echo(f"❌ {exc}", err=True)
        ctx.exit(EXIT_FAILURE)


# ---------- sigma ----------

def _parse_entries(values: Tuple[str, ...], exact: bool):
    try:
        if exact or any("/" in v for v in values):
            return [Fraction(v) for v in values]
        return [float(v) for v in values]
    except (ValueError, ZeroDivisionError) as exc:
        raise click.BadParameter(f"not a number: {exc}") from exc


@cli.command(context_settings={"ignore_unknown_options": True})
@click.argument("k", type=int)
@click.argument("entries", nargs=-1, required=True)
@click.option("--exact", is_flag=True, help="Evaluate in rational arithmetic")
@click.pass_context
def sigma(ctx: click.Context, k: int, entries: Tuple[str, ...], exact: bool) -> None:
    """Debug access to the symmetric-function layer: sigma table, cone class and bounds of ENTRIES."""
    try:
        _echo_json(spectrum_summary(k, _parse_entries(entries, exact)))
    except HessianLabError as exc:
        click.echo(f"❌ {exc}", err=True)
        ctx.exit(EXIT_FAILURE)
