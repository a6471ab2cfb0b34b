"""
Tests for torus grids, spectral differentiation and the pointwise Hessian state
"""
from math import comb, sqrt

import numpy as np
import pytest

from app.models.schemas import SolveConfig
from app.services.errors import ConeError, DomainError, GridMismatchError
from app.services.torusfield import (
    PotentialField,
    TorusBackground,
    TwistForm,
    alpha_bar,
    apply_laplace_omega,
    classical_ricci,
    complex_gradient,
    complex_hessian,
    evaluate_state,
    generalized_ricci,
    gradient_pairing,
    integrate,
    laplace_G,
    mixed_discriminant,
    potential_from_modes,
    random_potential,
    selfadjoint_defect,
    solve_laplace_omega,
    trace_G,
    wedge_density,
    wedge_integral,
    zeros,
)


def small_field(bg, seed=0, amplitude=0.02):
    return random_potential(bg, np.random.default_rng(seed), amplitude, role="phi")


# ---------- Background ----------

def test_volume_is_det_omega():
    assert TorusBackground(n=2, N=8).volume == pytest.approx(1.0)
    bg = TorusBackground(n=2, N=8, omega=np.diag([2.0, 3.0]))
    assert bg.volume == pytest.approx(6.0)
    assert integrate(bg, np.ones(bg.shape)) == pytest.approx(6.0)


def test_background_validation():
    with pytest.raises(DomainError):
        TorusBackground(n=2, N=8, omega=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DomainError):
        TorusBackground(n=0, N=8)
    with pytest.raises(DomainError):
        TorusBackground(n=1, N=2)


def test_collapsed_grid_shape():
    bg = TorusBackground(n=3, N=16, collapse_imag=True)
    assert bg.shape == (16, 1, 16, 1, 16, 1)
    assert TorusBackground(n=2, N=6).shape == (6, 6, 6, 6)


def test_from_config_reads_omega():
    config = SolveConfig(n=2, k=1, N=8, omega=[[2.0, 0.0], [0.0, 1.0]], omega_imag=[[0.0, 0.5], [-0.5, 0.0]])
    bg = TorusBackground.from_config(config)
    assert bg.omega[0, 1] == pytest.approx(0.5j)
    assert bg.volume == pytest.approx(1.75)


def test_fields_on_different_grids_are_rejected():
    a = TorusBackground(n=1, N=8)
    b = TorusBackground(n=1, N=16)
    with pytest.raises(GridMismatchError):
        PotentialField(a, np.zeros(b.shape))
    with pytest.raises(GridMismatchError):
        complex_hessian(a, zeros(b))


def test_collapsed_grid_rejects_imaginary_waves():
    bg = TorusBackground(n=1, N=8, collapse_imag=True)
    with pytest.raises(DomainError):
        potential_from_modes(bg, [(1.0, [0, 1], 0.0)])


# ---------- Differentiation ----------

def test_complex_hessian_of_single_mode():
    bg = TorusBackground(n=1, N=8)
    x = bg.coordinates()[0]
    u = potential_from_modes(bg, [(1.0, [1, 0], 0.0)])
    H = complex_hessian(bg, u)
    np.testing.assert_allclose(H[..., 0, 0].real, np.broadcast_to(-np.pi ** 2 * np.cos(2 * np.pi * x), bg.shape), atol=1e-12)
    np.testing.assert_allclose(H.imag, 0.0, atol=1e-12)


def test_complex_gradient_of_single_mode():
    bg = TorusBackground(n=1, N=8)
    x = bg.coordinates()[0]
    u = potential_from_modes(bg, [(1.0, [1, 0], 0.0)])
    g = complex_gradient(bg, u)[..., 0]
    # d = (d_x - i d_y) / 2
    np.testing.assert_allclose(g, np.broadcast_to(-np.pi * np.sin(2 * np.pi * x), bg.shape), atol=1e-12)


def test_mixed_hessian_entries_are_hermitian():
    bg = TorusBackground(n=2, N=6)
    H = complex_hessian(bg, small_field(bg))
    np.testing.assert_allclose(H, np.conj(np.swapaxes(H, -1, -2)), atol=1e-14)


def test_laplace_inverse_roundtrip():
    bg = TorusBackground(n=2, N=8, collapse_imag=True)
    u = small_field(bg, amplitude=1.0).data
    u = u - u.mean()
    np.testing.assert_allclose(solve_laplace_omega(bg, apply_laplace_omega(bg, u)), u, atol=1e-12)


# ---------- State ----------

@pytest.mark.parametrize("n,k", [(1, 1), (2, 1), (2, 2), (3, 2)])
def test_state_of_zero_potential(n, k):
    bg = TorusBackground(n=n, N=8, collapse_imag=True)
    state = evaluate_state(zeros(bg, "phi"), k)
    np.testing.assert_allclose(state.ratio, 1.0)
    np.testing.assert_allclose(state.F, 0.0, atol=1e-15)
    np.testing.assert_allclose(state.G, np.broadcast_to((k / n) * np.eye(n), state.G.shape), atol=1e-14)


def test_laplace_G_at_zero_is_scaled_laplacian():
    bg = TorusBackground(n=2, N=8, collapse_imag=True)
    state = evaluate_state(zeros(bg, "phi"), 1)
    u = small_field(bg, seed=3, amplitude=1.0)
    np.testing.assert_allclose(laplace_G(state, u).data, 0.5 * apply_laplace_omega(bg, u), atol=1e-12)


def test_inadmissible_potential_raises_cone_error():
    bg = TorusBackground(n=1, N=8, collapse_imag=True)
    phi = potential_from_modes(bg, [(1.0, [1, 0], 0.0)], role="phi")
    with pytest.raises(ConeError) as info:
        evaluate_state(phi, 1)
    assert info.value.cone_class == 0


@pytest.mark.parametrize("n,k", [(2, 1), (2, 2), (3, 1), (3, 2), (3, 3)])
def test_ratio_matches_wedge_density(n, k):
    bg = TorusBackground(n=n, N=8, collapse_imag=True)
    state = evaluate_state(small_field(bg), k)
    density = wedge_density(bg, [(state, k), ("omega", n - k)])
    np.testing.assert_allclose(density, state.sigma_k / comb(n, k), rtol=1e-10)


def test_mixed_discriminant_of_identity_and_determinant():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert float(mixed_discriminant([np.eye(2)] * 2)) == pytest.approx(1.0)
    assert float(mixed_discriminant([A, A])) == pytest.approx(np.linalg.det(A))


def test_ricci_forms_agree_at_top_degree():
    bg = TorusBackground(n=2, N=8, collapse_imag=True)
    phi = small_field(bg, seed=4)
    np.testing.assert_allclose(generalized_ricci(phi, 2), classical_ricci(phi), atol=1e-10)


def test_gradient_pairing_is_symmetric_and_nonnegative():
    bg = TorusBackground(n=2, N=6)
    state = evaluate_state(small_field(bg), 2)
    a = small_field(bg, seed=1, amplitude=1.0)
    b = small_field(bg, seed=2, amplitude=1.0)
    np.testing.assert_allclose(gradient_pairing(state, a, b), gradient_pairing(state, b, a), atol=1e-12)
    assert np.min(gradient_pairing(state, a, a)) >= -1e-12


def test_laplace_G_selfadjoint_for_k_equal_one():
    bg = TorusBackground(n=2, N=6, collapse_imag=True)
    state = evaluate_state(small_field(bg), 1)
    assert selfadjoint_defect(state) < 1e-10


# ---------- Twisting ----------

@pytest.mark.parametrize("n,k", [(2, 1), (2, 2), (3, 2)])
def test_alpha_bar_of_scaled_omega(n, k):
    bg = TorusBackground(n=n, N=8, collapse_imag=True)
    state = evaluate_state(zeros(bg, "phi"), k)
    assert alpha_bar(state, TwistForm.scaled_omega(bg, 0.7)) == pytest.approx(0.7 * k)
    np.testing.assert_allclose(trace_G(state, bg.omega), k)


def test_twist_norm_and_scaling():
    bg = TorusBackground(n=2, N=8, collapse_imag=True)
    twist = TwistForm.scaled_omega(bg, 1.0)
    assert twist.sup_norm() == pytest.approx(sqrt(2.0))
    assert twist.scaled(0.5).sup_norm() == pytest.approx(sqrt(2.0) / 2)
    assert TwistForm.zero(bg).is_zero
    with pytest.raises(GridMismatchError):
        TwistForm(bg, np.zeros((3, 3)))


# ---------- Invariants of the state ----------

TWISTED = np.array([[2.0, 0.3j], [-0.3j, 1.0]])


@pytest.mark.parametrize("k", [1, 2])
def test_trace_of_omega_phi_is_k(k):
    bg = TorusBackground(n=2, N=6, omega=TWISTED)
    state = evaluate_state(small_field(bg, seed=11, amplitude=0.05), k)
    np.testing.assert_allclose(trace_G(state, state.omega_phi), k, rtol=1e-12)


@pytest.mark.parametrize("n,k,bg", [
    (2, 1, TorusBackground(n=2, N=6, omega=TWISTED)),
    (2, 2, TorusBackground(n=2, N=6, omega=TWISTED)),
    (3, 2, TorusBackground(n=3, N=8, collapse_imag=True)),
    (3, 3, TorusBackground(n=3, N=8, collapse_imag=True)),
])
def test_total_hessian_mass_is_independent_of_phi(n, k, bg):
    for seed in (12, 13):
        state = evaluate_state(small_field(bg, seed=seed, amplitude=0.05), k)
        assert integrate(bg, state.ratio) == pytest.approx(bg.volume, rel=1e-12)
        assert wedge_integral(bg, [(state, k), ("omega", n - k)]) == pytest.approx(bg.volume, rel=1e-12)


@pytest.mark.parametrize("n,k,bg", [
    (2, 2, TorusBackground(n=2, N=6, omega=TWISTED)),
    (3, 2, TorusBackground(n=3, N=8, collapse_imag=True)),
    (3, 3, TorusBackground(n=3, N=8, collapse_imag=True)),
])
def test_laplace_G_weighted_by_sigma_k_has_zero_mean(n, k, bg):
    state = evaluate_state(small_field(bg, seed=14, amplitude=0.05), k)
    u = small_field(bg, seed=15, amplitude=1.0)
    weighted = laplace_G(state, u).data * state.sigma_k
    assert abs(integrate(bg, weighted)) <= 1e-12 * integrate(bg, np.abs(weighted))


def test_frame_rebuilds_omega_phi():
    bg = TorusBackground(n=2, N=6, omega=TWISTED)
    state = evaluate_state(small_field(bg, seed=16, amplitude=0.05), 2)
    columns = bg.omega @ state.frame
    rebuilt = (columns * state.lam[..., None, :]) @ np.conj(np.swapaxes(columns, -1, -2))
    np.testing.assert_allclose(rebuilt, state.omega_phi, atol=1e-12)
    gram = np.conj(np.swapaxes(state.frame, -1, -2)) @ bg.omega @ state.frame
    np.testing.assert_allclose(gram, np.broadcast_to(np.eye(2), gram.shape), atol=1e-12)


def test_complex_hessian_converges_spectrally():
    # u = exp(a cos 2 pi x) is analytic but not band-limited
    a = 0.5
    errors = []
    for N in (8, 16, 32):
        bg = TorusBackground(n=1, N=N, collapse_imag=True)
        x = bg.coordinates()[0]
        u = np.broadcast_to(np.exp(a * np.cos(2 * np.pi * x)), bg.shape)
        exact = np.pi ** 2 * a * u * (a * np.sin(2 * np.pi * x) ** 2 - np.cos(2 * np.pi * x))
        H = complex_hessian(bg, PotentialField(bg, np.array(u)))
        errors.append(float(np.max(np.abs(H[..., 0, 0] - exact))))
    assert errors[0] > errors[1] > 0
    assert errors[1] < 1e-3 * errors[0]
    assert errors[2] < 1e-10


@pytest.mark.parametrize("n,k,bg", [
    (2, 1, TorusBackground(n=2, N=6, omega=TWISTED)),
    (2, 2, TorusBackground(n=2, N=6, omega=TWISTED)),
    (3, 2, TorusBackground(n=3, N=8, collapse_imag=True)),
])
def test_alpha_bar_is_cohomological(n, k, bg):
    beta = small_field(bg, seed=17, amplitude=0.1)
    twist = TwistForm(bg, 0.7 * bg.omega + complex_hessian(bg, beta))
    for seed in (18, 19):
        state = evaluate_state(small_field(bg, seed=seed, amplitude=0.05), k)
        assert alpha_bar(state, twist) == pytest.approx(0.7 * k, rel=1e-10)
        density = k * wedge_density(bg, [(twist.values, 1), (state, k - 1), ("omega", n - k)])
        np.testing.assert_allclose(trace_G(state, twist.values) * state.ratio, density, atol=1e-12)


@pytest.mark.parametrize("n,k", [(2, 1), (2, 2), (3, 2)])
def test_F_is_linearized_by_scaled_laplacian(n, k):
    bg = TorusBackground(n=n, N=8, collapse_imag=True)
    u = small_field(bg, seed=20, amplitude=0.1).data
    errors, linear = [], []
    for eps in (1e-3, 1e-4):
        state = evaluate_state(PotentialField(bg, eps * u, "phi"), k)
        predicted = eps * (k / n) * apply_laplace_omega(bg, u)
        errors.append(float(np.max(np.abs(state.F - predicted))))
        linear.append(float(np.max(np.abs(predicted))))
    assert errors[1] <= 1e-2 * linear[1]
    assert 0.008 < errors[1] / errors[0] < 0.012
