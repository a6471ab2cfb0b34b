"""
Tests for the metric, connection, geodesics and curvature of the space of k-Hessian potentials
"""
from dataclasses import replace

import numpy as np
import pytest

from app.services.energy import PotentialPath
from app.services.errors import DomainError, GridMismatchError
from app.services.mabuchi_geom import (
    TangentVector,
    classical_curvature,
    connection_D,
    curvature_bruteforce,
    curvature_density,
    curvature_form,
    curvature_record,
    curvature_sample,
    curvature_scale,
    exact_point_density,
    frame_components,
    geodesic_residuals,
    metric_compatibility_defect,
    metric_inner,
    shoot_geodesic,
    solve_geodesic,
    torsion_defect,
)
from app.services.torusfield import TorusBackground, evaluate_state, random_potential, zeros


def collapsed(n, N=16):
    return TorusBackground(n=n, N=N, collapse_imag=True)


def field(bg, seed, amplitude=0.02, role="phi"):
    return random_potential(bg, np.random.default_rng(seed), amplitude, role=role)


# ---------- Metric and connection ----------

def test_metric_at_zero_is_l2_product():
    bg = collapsed(2)
    u = zeros(bg, "phi")
    a = TangentVector(u, field(bg, 1, 1.0, "generic"))
    b = TangentVector(u, field(bg, 2, 1.0, "generic"))
    expected = float(np.mean(a.value.data * b.value.data))
    assert metric_inner(u, a, b, 1) == pytest.approx(expected, rel=1e-12)


def test_tangent_vectors_must_share_base():
    bg = collapsed(2)
    u = zeros(bg, "phi")
    other = field(bg, 3)
    X = TangentVector(other, field(bg, 4, 1.0, "generic"))
    with pytest.raises(GridMismatchError):
        metric_inner(u, X, X, 1)


@pytest.mark.parametrize("k", [1, 2])
def test_connection_is_metric_compatible(k):
    bg = collapsed(2)
    a, b = field(bg, 5).data, field(bg, 6).data
    p, q = field(bg, 7, 1.0).data, field(bg, 8, 1.0).data
    h = 1e-3
    times = [0.5 - h, 0.5, 0.5 + h]
    u = PotentialPath.sample(lambda t: a + t * b, bg, times)
    phi = PotentialPath.sample(lambda t: p + t * q, bg, times)
    psi = PotentialPath.sample(lambda t: q * (1.0 + t), bg, times)
    assert abs(metric_compatibility_defect(u, phi, psi, 1, k)) < 1e-5


def test_connection_needs_interior_sample():
    bg = collapsed(1)
    path = PotentialPath.sample(lambda t: np.zeros(bg.shape), bg, [0.0, 0.1, 0.2])
    with pytest.raises(DomainError):
        connection_D(path, path, 0, 1)


@pytest.mark.parametrize("k", [1, 2])
def test_connection_is_torsion_free(k):
    bg = collapsed(2)
    a, b, c, d = (field(bg, s).data for s in (9, 10, 11, 12))

    def family(s, t):
        return a + s * b + t * c + s * t * d

    assert torsion_defect(family, bg, k, 1e-3) < 1e-8


# ---------- Geodesics ----------

@pytest.mark.parametrize("k", [1, 2])
def test_constant_and_affine_geodesics_are_exact(k):
    bg = collapsed(2, N=8)
    phi0 = field(bg, 13)
    for end in (phi0, phi0.with_data(phi0.data + 0.4)):
        geodesic = solve_geodesic(phi0, end, 1e-3, k, time_steps=6)
        for sample, t in zip(geodesic.path.samples, geodesic.path.times):
            np.testing.assert_allclose(sample.data, (1 - t) * phi0.data + t * end.data, atol=1e-10)


@pytest.mark.parametrize("k", [1, 2])
def test_geodesic_matches_shooting_oracle(k):
    bg = collapsed(2, N=8)
    u0 = field(bg, 14)
    v0 = field(bg, 15, 0.02, "generic").data
    times = np.linspace(0.0, 1.0, 9)
    shot = shoot_geodesic(u0, v0, k, times)
    geodesic = solve_geodesic(shot.samples[0], shot.samples[-1], 1e-4, k, time_steps=8, tol=1e-10)
    affine_gap = max(
        float(np.max(np.abs(s.data - ((1 - t) * shot.samples[0].data + t * shot.samples[-1].data))))
        for s, t in zip(shot.samples, times)
    )
    error = max(float(np.max(np.abs(a.data - b.data))) for a, b in zip(geodesic.path.samples, shot.samples))
    assert error < 1e-5
    assert error < 0.2 * affine_gap


def test_geodesic_energy_nearly_constant():
    bg = collapsed(2, N=8)
    geodesic = solve_geodesic(field(bg, 16), field(bg, 17), 1e-3, 1, time_steps=8)
    energies = geodesic.energies()
    assert (max(energies) - min(energies)) / np.mean(energies) < 0.05
    assert len(geodesic.rows()) == 7


def test_continuation_residuals_decrease():
    bg = collapsed(2, N=8)
    geodesic = solve_geodesic(field(bg, 18), field(bg, 19), 1e-2, 2, time_steps=6)
    residuals = [entry["residual"] for entry in geodesic.eps_trace]
    assert len(residuals) > 1
    assert all(later <= earlier * (1 + 1e-6) + 1e-10 for earlier, later in zip(residuals, residuals[1:]))
    assert residuals[-1] == pytest.approx(geodesic.residual)
    assert geodesic.residual == pytest.approx(max(geodesic_residuals(geodesic.path, 2)))


def test_converged_needs_the_whole_schedule():
    bg = collapsed(2, N=8)
    geodesic = solve_geodesic(field(bg, 18), field(bg, 19), 1e-2, 1, time_steps=6, tol=1e-9)
    assert geodesic.converged(1e-9)
    assert all(entry["newton_residual"] <= 1e-9 for entry in geodesic.eps_trace)
    assert not replace(geodesic, eps_trace=geodesic.eps_trace[:-1]).converged(1e-9)
    assert not replace(geodesic, eps_trace=[]).converged(1e-9)
    failed = geodesic.eps_trace[:-1] + [{"epsilon": 1e-2, "error": "line search stalled"}]
    assert not replace(geodesic, eps_trace=failed).converged(1e-9)
    grown = [dict(entry) for entry in geodesic.eps_trace]
    grown[-1]["residual"] = 10.0 * grown[0]["residual"] + 1.0
    assert not replace(geodesic, eps_trace=grown).converged(1e-9)


def test_source_regularization_residual_scales_with_epsilon():
    bg = collapsed(2, N=8)
    eps = 1e-3
    geodesic = solve_geodesic(
        field(bg, 20), field(bg, 21), eps, 1, time_steps=6, regularization="source", eps_start=0.1
    )
    assert geodesic.regularization == "source"
    assert geodesic.residual <= 2.0 * eps


def test_unknown_regularization_is_rejected():
    bg = collapsed(1, N=8)
    with pytest.raises(DomainError):
        solve_geodesic(zeros(bg, "phi"), zeros(bg, "phi"), 0.1, 1, regularization="viscous")
    with pytest.raises(DomainError):
        solve_geodesic(zeros(bg, "phi"), zeros(bg, "phi"), 0.0, 1)


# ---------- Curvature ----------

@pytest.mark.parametrize("n,k,bg", [
    (2, 1, TorusBackground(n=2, N=6)),
    (2, 2, TorusBackground(n=2, N=6)),
    (3, 2, TorusBackground(n=3, N=12, collapse_imag=True)),
])
def test_curvature_is_nonpositive(n, k, bg):
    rng = np.random.default_rng(n + k)
    for _ in range(5):
        u, X, Y = curvature_sample(bg, k, rng)
        assert curvature_form(u, X, Y, k) <= 1e-10 * curvature_scale(u, X, Y)


@pytest.mark.parametrize("k", [1, 2])
def test_curvature_matches_bruteforce(k):
    bg = TorusBackground(n=2, N=8)
    u, X, Y = curvature_sample(bg, k, np.random.default_rng(30 + k), amplitude=0.01)
    closed = curvature_form(u, X, Y, k)
    scale = curvature_scale(u, X, Y)
    coarse = curvature_bruteforce(u, X, Y, k, h=2e-3)
    fine = curvature_bruteforce(u, X, Y, k, h=1e-3)
    assert abs((4.0 * fine - coarse) / 3.0 - closed) <= 1e-4 * scale


def test_top_degree_curvature_matches_classical_formula():
    bg = TorusBackground(n=2, N=6)
    u, X, Y = curvature_sample(bg, 2, np.random.default_rng(40))
    closed = curvature_form(u, X, Y, 2)
    assert closed == pytest.approx(classical_curvature(u, X, Y), abs=1e-8 * curvature_scale(u, X, Y))
    assert closed < 0


def test_exact_point_density_agrees_with_float_density():
    bg = TorusBackground(n=2, N=6)
    u, X, Y = curvature_sample(bg, 1, np.random.default_rng(41))
    state = evaluate_state(u, 1)
    x = frame_components(state, X.value.data)
    y = frame_components(state, Y.value.data)
    density = curvature_density(state, x, y)
    idx = (1, 2, 3, 4)
    exact = exact_point_density(state.lam[idx], x[idx], y[idx], 1)
    assert exact <= 0
    assert float(exact) == pytest.approx(density[idx], rel=1e-9, abs=1e-14)


def test_curvature_record_margin():
    bg = collapsed(2)
    record = curvature_record(0, bg, 2, np.random.default_rng(42))
    assert record.n == 2 and record.k == 2
    assert record.value <= 0.0
    assert record.bound_margin >= 0.0


@pytest.mark.parametrize("k", [1, 2])
def test_curvature_vanishes_as_planes_degenerate(k):
    bg = TorusBackground(n=2, N=8)
    u, X, Z = curvature_sample(bg, k, np.random.default_rng(50 + k))
    scale = curvature_scale(u, X, Z)
    assert abs(curvature_form(u, X, X, k)) <= 1e-14 * scale
    reference = curvature_form(u, X, Z, k)
    assert reference < 0
    for delta in (1e-1, 1e-2, 1e-3):
        Y = TangentVector(u, X.value.with_data(X.value.data + delta * Z.value.data))
        assert curvature_form(u, X, Y, k) == pytest.approx(delta ** 2 * reference, rel=1e-6)


@pytest.mark.parametrize("n,k", [(2, 1), (2, 2), (3, 2)])
def test_curvature_density_is_symmetric(n, k):
    bg = TorusBackground(n=n, N=6, collapse_imag=True)
    u, X, Y = curvature_sample(bg, k, np.random.default_rng(60 + n + k))
    state = evaluate_state(u, k)
    x = frame_components(state, X.value.data)
    y = frame_components(state, Y.value.data)
    forward = curvature_density(state, x, y)
    np.testing.assert_allclose(curvature_density(state, y, x), forward, rtol=1e-12, atol=1e-15 * np.max(np.abs(forward)))
    assert curvature_form(u, X, Y, k) == pytest.approx(curvature_form(u, Y, X, k), rel=1e-12)
