"""
Command-line tests: run, verify, inspect and sigma through click's test runner
"""
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from app.cli import EXIT_FAILURE, EXIT_SPEC, cli

EXPERIMENTS = Path(__file__).parent / "experiments"


@pytest.fixture
def runner():
    return CliRunner()


def test_sigma_prints_summary(runner):
    result = runner.invoke(cli, ["sigma", "2", "1", "1", "1"])
    assert result.exit_code == 0, result.output
    summary = json.loads(result.output)
    assert summary["sigma_k"] == pytest.approx(3.0)
    assert summary["cone_class"] == 3


def test_sigma_exact_and_negative_entries(runner):
    result = runner.invoke(cli, ["sigma", "1", "1/2", "-1/4", "--exact"])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["sigma_k"] == "1/4"


def test_sigma_rejects_degree_out_of_range(runner):
    result = runner.invoke(cli, ["sigma", "4", "1", "2"])
    assert result.exit_code == EXIT_FAILURE


def test_verify_with_zero_samples_passes(runner, tmp_path):
    result = runner.invoke(cli, ["verify", "cone", "--samples", "0", "--output-dir", str(tmp_path)])
    assert result.exit_code == 0, result.output
    summary = json.loads(result.output)
    assert summary["success"] is True
    assert summary["message"] == "no samples"
    report = json.loads((tmp_path / "verify_cone.json").read_text())
    assert report["suite"] == "cone"


def test_verify_unknown_suite_is_a_usage_error(runner):
    result = runner.invoke(cli, ["verify", "nonexistent"])
    assert result.exit_code == 2


def test_run_trivial_solve(runner, tmp_path):
    out = tmp_path / "trivial"
    result = runner.invoke(cli, ["run", str(EXPERIMENTS / "solve_trivial.yaml"), "--output-dir", str(out)])
    assert result.exit_code == 0, result.output
    for name in ("manifest.json", "phi.npz", "F.npz", "residuals.json", "phi_slice.csv"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["success"] is True
    assert "numpy" in manifest["versions"]
    residuals = json.loads((out / "residuals.json").read_text())
    assert residuals["r1"] == pytest.approx(0.0, abs=1e-14)

    inspected = runner.invoke(cli, ["inspect", str(out)])
    assert inspected.exit_code == 0, inspected.output
    summary = json.loads(inspected.output)
    assert summary["kind"] == "solve"
    assert summary["residuals"]["r1"] == pytest.approx(0.0, abs=1e-14)
    assert summary["fields"]["phi"]["sup_norm"] == pytest.approx(0.0, abs=1e-14)

    single = runner.invoke(cli, ["inspect", str(out / "F.npz")])
    assert single.exit_code == 0, single.output
    assert json.loads(single.output)["meta"]["role"] == "F"


def test_invalid_spec_exits_with_spec_code(runner, tmp_path):
    spec = tmp_path / "bad.yaml"
    spec.write_text("name: bad\nkind: solve\nsolve:\n  n: 2\n  k: 3\n  N: 8\n")
    result = runner.invoke(cli, ["run", str(spec), "--output-dir", str(tmp_path / "out")])
    assert result.exit_code == EXIT_SPEC
    assert "solve" in result.output


def test_unknown_experiment_kind_is_rejected(runner, tmp_path):
    spec = tmp_path / "bad_kind.yaml"
    spec.write_text("name: bad\nkind: teleport\n")
    result = runner.invoke(cli, ["run", str(spec)])
    assert result.exit_code == EXIT_SPEC


def test_inspect_rejects_plain_directory(runner, tmp_path):
    result = runner.invoke(cli, ["inspect", str(tmp_path)])
    assert result.exit_code == EXIT_FAILURE


def test_inequality_sweep_is_deterministic(runner, tmp_path):
    spec = tmp_path / "sweep.yaml"
    spec.write_text("name: sweep\nkind: inequality_sweep\nseed: 3\nsamples: 200\nsolve:\n  n: 3\n  k: 2\n  N: 4\n")
    tables = []
    for label in ("first", "second"):
        out = tmp_path / label
        result = runner.invoke(cli, ["run", str(spec), "--output-dir", str(out)])
        assert result.exit_code == 0, result.output
        tables.append((out / "inequality.csv").read_bytes())
    assert tables[0] == tables[1]
    lines = tables[0].decode().splitlines()
    assert len(lines) == 201
    rows = [line.split(",") for line in lines[1:]]
    assert min(float(r[4]) for r in rows) >= 2.0 * (1 - 1e-12)


def test_geodesic_run_reports_finished_continuation(runner, tmp_path):
    out = tmp_path / "geodesic"
    result = runner.invoke(cli, ["run", str(EXPERIMENTS / "geodesic.yaml"), "--output-dir", str(out)])
    assert result.exit_code == 0, result.output
    report = json.loads((out / "geodesic_report.json").read_text())
    assert report["converged"] is True
    assert report["eps_trace"][-1]["epsilon"] == pytest.approx(0.01)
    assert json.loads((out / "manifest.json").read_text())["success"] is True
