"""
Riemannian structure on the space of k-Hessian potentials.

    <a, b>_u = int a b omega_u^k ^ omega^(n-k)
    D_{u'} phi = phi' - Q(u', phi),   Q(a, b) = Re(db^H G da)
    geodesics:  u'' = |d u'|^2_G
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dst, idst
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import LinearOperator
from scipy.special import comb

from app.models.schemas import CurvatureRecord
from app.services.energy import PotentialPath
from app.services.errors import ConeError, DomainError, GridMismatchError, SolverError
from app.services.newton import newton_krylov
from app.services.symcone import lemma22_matrix, sigma_derivatives, sigma_table, to_exact
from app.services.torusfield import (
    HessianState,
    PotentialField,
    TorusBackground,
    apply_laplace_omega,
    complex_gradient,
    complex_hessian,
    evaluate_state,
    field_data,
    gradient_pairing,
    integrate,
    random_potential,
    state_from_array,
)

logger = logging.getLogger(__name__)

REGULARIZATIONS = ("elliptic", "source")


@dataclass
class TangentVector:
    """A function `value` tangent at the admissible potential `base`."""

    base: PotentialField
    value: PotentialField

    def __post_init__(self) -> None:
        self.base.background.require_match(self.value.background)


def _same_base(u: PotentialField, *vectors: TangentVector) -> None:
    for v in vectors:
        u.background.require_match(v.base.background)
        if not np.array_equal(u.data, v.base.data):
            raise GridMismatchError("tangent vectors are based at a different potential")


# ---------- Metric and connection ----------

def metric_inner(u: PotentialField, a: TangentVector, b: TangentVector, k: int, state: Optional[HessianState] = None) -> float:
    """int a b omega_u^k ^ omega^(n-k)."""
    _same_base(u, a, b)
    state = state or evaluate_state(u, k)
    return integrate(u.background, a.value.data * b.value.data * state.ratio)


def _inner(state: HessianState, a: np.ndarray, b: np.ndarray) -> float:
    return integrate(state.background, a * b * state.ratio)


def connection_D(u: PotentialPath, phi: PotentialPath, i: int, k: int) -> TangentVector:
    """D_{u'} phi at the interior sample i, time derivatives by centered differences."""
    if len(u) != len(phi) or not np.allclose(u.times, phi.times):
        raise GridMismatchError("u and phi must be sampled at the same times")
    u.background.require_match(phi.background)
    if not 0 < i < len(u) - 1:
        raise DomainError(f"sample {i} is not interior")
    state = evaluate_state(u.samples[i], k)
    value = phi.velocity(i) - gradient_pairing(state, u.velocity(i), phi.samples[i].data)
    return TangentVector(u.samples[i], PotentialField(u.background, value))


def metric_compatibility_defect(u: PotentialPath, phi: PotentialPath, psi: PotentialPath, i: int, k: int) -> float:
    """d/dt <phi, psi> - <D phi, psi> - <phi, D psi> at sample i."""
    h = u.step
    ends = [
        _inner(evaluate_state(u.samples[j], k), phi.samples[j].data, psi.samples[j].data) for j in (i - 1, i + 1)
    ]
    state = evaluate_state(u.samples[i], k)
    d_phi = connection_D(u, phi, i, k).value.data
    d_psi = connection_D(u, psi, i, k).value.data
    rhs = _inner(state, d_phi, psi.samples[i].data) + _inner(state, phi.samples[i].data, d_psi)
    return (ends[1] - ends[0]) / (2.0 * h) - rhs


def torsion_defect(family: Callable[[float, float], np.ndarray], background: TorusBackground, k: int, h: float) -> float:
    """sup |D_s d_t u - D_t d_s u| at (s, t) = (0, 0) for a two-parameter family."""
    def u_t(s: float) -> np.ndarray:
        return (family(s, h) - family(s, -h)) / (2 * h)

    def u_s(t: float) -> np.ndarray:
        return (family(h, t) - family(-h, t)) / (2 * h)

    state = state_from_array(background, family(0.0, 0.0), k)
    ds_ut = (u_t(h) - u_t(-h)) / (2 * h) - gradient_pairing(state, u_s(0.0), u_t(0.0))
    dt_us = (u_s(h) - u_s(-h)) / (2 * h) - gradient_pairing(state, u_t(0.0), u_s(0.0))
    return float(np.max(np.abs(ds_ut - dt_us)))


# ---------- Geodesics ----------

@dataclass
class GeodesicPath:
    """Regularized geodesic u_t, t in [0, 1], with its residual history over the eps schedule."""

    path: PotentialPath
    k: int
    epsilon: float
    residual: float
    regularization: str = "elliptic"
    time_scheme: str = "uniform"
    eps_trace: List[Dict[str, float]] = field(default_factory=list)

    def energies(self) -> List[float]:
        """<u', u'>_{u_t} at interior slices."""
        return [
            _inner(evaluate_state(self.path.samples[j], self.k), self.path.velocity(j), self.path.velocity(j))
            for j in range(1, len(self.path) - 1)
        ]

    def converged(self, tol: float) -> bool:
        """
        Continuation reached the target eps with the regularized residual under tol, and the
        geodesic residual never grew along the schedule.
        """
        if not self.eps_trace:
            return False
        last = self.eps_trace[-1]
        if "error" in last or last["epsilon"] != self.epsilon or last.get("newton_residual", math.inf) > tol:
            return False
        history = [entry["residual"] for entry in self.eps_trace]
        return all(b <= a * (1.0 + 1e-6) + tol for a, b in zip(history, history[1:]))

    def rows(self) -> List[Tuple[float, float, float]]:
        """CSV rows (t, energy, residual) at interior slices."""
        residuals = geodesic_residuals(self.path, self.k)
        return [
            (float(self.path.times[j]), e, r)
            for j, e, r in zip(range(1, len(self.path) - 1), self.energies(), residuals)
        ]


def geodesic_residuals(path: PotentialPath, k: int) -> List[float]:
    """sup |u'' - |d u'|^2_G| at every interior slice."""
    out = []
    for j in range(1, len(path) - 1):
        state = evaluate_state(path.samples[j], k)
        v = path.velocity(j)
        out.append(float(np.max(np.abs(path.acceleration(j) - gradient_pairing(state, v, v)))))
    return out


def _geodesic_operator(
    background: TorusBackground,
    u0: np.ndarray,
    u1: np.ndarray,
    m: int,
    k: int,
    eps: float,
    regularization: str,
    cone_eps: float,
):
    shape = background.shape
    ht = 1.0 / m
    times = np.linspace(0.0, 1.0, m + 1)
    affine = [(1.0 - t) * u0 + t * u1 for t in times]

    def full(x: np.ndarray) -> List[np.ndarray]:
        inner = x.reshape((m - 1,) + shape)
        return [u0] + [inner[j] for j in range(m - 1)] + [u1]

    def residual(x: np.ndarray):
        u = full(x)
        out = np.empty((m - 1,) + shape)
        for j in range(1, m):
            state = state_from_array(background, u[j], k, cone_eps)
            v = (u[j + 1] - u[j - 1]) / (2.0 * ht)
            acc = (u[j + 1] - 2.0 * u[j] + u[j - 1]) / ht ** 2
            geo = acc - gradient_pairing(state, v, v)
            if regularization == "elliptic":
                out[j - 1] = geo + eps * apply_laplace_omega(background, u[j] - affine[j])
            else:
                out[j - 1] = geo * state.ratio - eps
        return out.ravel(), None

    lam_t = (2.0 * np.cos(np.pi * np.arange(1, m) / m) - 2.0) / ht ** 2
    symbol = background.laplace_symbol * (eps if regularization == "elliptic" else 0.0)
    denom = lam_t.reshape((m - 1,) + (1,) * len(shape)) + symbol[None, ...]

    def precondition(v: np.ndarray) -> np.ndarray:
        w = dst(v.reshape((m - 1,) + shape), type=1, axis=0)
        w_hat = np.fft.fftn(w, axes=tuple(range(1, len(shape) + 1)))
        w = np.fft.ifftn(w_hat / denom, axes=tuple(range(1, len(shape) + 1))).real
        return idst(w, type=1, axis=0).ravel()

    return residual, precondition, affine


def solve_geodesic(
    phi0: PotentialField,
    phi1: PotentialField,
    epsilon: float,
    k: int,
    time_steps: int = 8,
    regularization: str = "elliptic",
    eps_start: float = 1.0,
    tol: float = 1e-9,
    max_newton: int = 40,
    fd_step: float = 1e-7,
    cone_eps: float = 1e-10,
) -> GeodesicPath:
    """
    Epsilon-regularized geodesic between phi0 and phi1.

    elliptic: u'' - |d u'|^2_G + eps Delta_omega(u - l) = 0, l the affine interpolant
              (affine geodesics are exact for every eps)
    source:   (u'' - |d u'|^2_G) omega_u^k ^ omega^(n-k) = eps omega^n

    Collocation on a uniform time grid, Newton-Krylov in space-time with the inverse
    time second difference as preconditioner, eps halved from eps_start to epsilon.
    """
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    if regularization not in REGULARIZATIONS:
        raise DomainError(f"unknown regularization '{regularization}'")
    bg = phi0.background
    bg.require_match(phi1.background)
    for end in (phi0, phi1):
        evaluate_state(end, k)
    m = time_steps
    shape = bg.shape
    times = np.linspace(0.0, 1.0, m + 1)
    logger.info(f"🚀 Geodesic solve n={bg.n} k={k} steps={m} eps={epsilon:g} ({regularization})")

    schedule = [max(eps_start, epsilon)]
    while schedule[-1] > epsilon:
        schedule.append(max(schedule[-1] / 2.0, epsilon))

    x = np.concatenate([((1.0 - t) * phi0.data + t * phi1.data).ravel() for t in times[1:-1]])
    trace: List[Dict[str, float]] = []
    for eps in schedule:
        residual, precondition, _ = _geodesic_operator(bg, phi0.data, phi1.data, m, k, eps, regularization, cone_eps)
        size = x.size

        def jacobian(xc: np.ndarray, context: Any, residual=residual) -> LinearOperator:
            base, _ = residual(xc)

            def matvec(v: np.ndarray) -> np.ndarray:
                norm = float(np.max(np.abs(v)))
                if norm == 0.0:
                    return np.zeros_like(v)
                h = fd_step * max(1.0, float(np.max(np.abs(xc)))) / norm
                shifted, _ = residual(xc + h * v)
                return (shifted - base) / h

            return LinearOperator((size, size), matvec=matvec, dtype=float)

        def preconditioner(xc: np.ndarray, context: Any, precondition=precondition) -> LinearOperator:
            return LinearOperator((size, size), matvec=precondition, dtype=float)

        try:
            result = newton_krylov(
                residual, jacobian, preconditioner, x, tol=tol, max_iter=max_newton, label=f"geodesic eps={eps:.3g}"
            )
        except SolverError as exc:
            trace.append({"epsilon": eps, "error": str(exc)})
            logger.error(f"❌ Geodesic continuation failed at eps={eps:.3g}")
            raise SolverError(f"geodesic continuation failed at eps={eps:.3g}", trace) from exc
        x = result.x
        path = _path_from(bg, phi0, phi1, x, times)
        geo = max(geodesic_residuals(path, k))
        trace.append(
            {"epsilon": eps, "residual": geo, "newton_residual": result.sup_residual, "iterations": float(result.iterations)}
        )
        logger.debug(f"geodesic eps={eps:.3g}: geodesic residual {geo:.3e}")

    path = _path_from(bg, phi0, phi1, x, times)
    residual_value = max(geodesic_residuals(path, k))
    logger.info(f"✅ Geodesic converged: residual {residual_value:.3e} at eps={epsilon:g}")
    return GeodesicPath(path, k, epsilon, residual_value, regularization, "uniform", trace)


def _path_from(bg: TorusBackground, phi0: PotentialField, phi1: PotentialField, x: np.ndarray, times: np.ndarray) -> PotentialPath:
    inner = x.reshape((len(times) - 2,) + bg.shape)
    samples = [phi0.with_data(phi0.data, "phi")]
    samples += [PotentialField(bg, inner[j], "phi") for j in range(len(times) - 2)]
    samples.append(phi1.with_data(phi1.data, "phi"))
    return PotentialPath(samples, times)


def shoot_geodesic(
    u0: PotentialField, v0: np.ndarray, k: int, times: Sequence[float], rtol: float = 1e-10, atol: float = 1e-12
) -> PotentialPath:
    """Oracle: integrate u'' = |d u'|^2_G from (u0, v0) with an adaptive Runge-Kutta scheme."""
    bg = u0.background
    M = bg.size
    shape = bg.shape

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        u = y[:M].reshape(shape)
        v = y[M:].reshape(shape)
        state = state_from_array(bg, u, k)
        return np.concatenate([v.ravel(), gradient_pairing(state, v, v).ravel()])

    y0 = np.concatenate([u0.data.ravel(), field_data(bg, v0).ravel()])
    times = np.asarray(times, dtype=float)
    sol = solve_ivp(rhs, (times[0], times[-1]), y0, t_eval=times, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise SolverError(f"shooting failed: {sol.message}")
    return PotentialPath([PotentialField(bg, sol.y[:M, j].reshape(shape), "phi") for j in range(len(times))], times)


# ---------- Curvature ----------

def frame_components(state: HessianState, X: np.ndarray) -> np.ndarray:
    """Components of dX in the frame diagonalizing omega^-1 omega_u (orthonormal for omega)."""
    g = complex_gradient(state.background, X)
    return np.einsum("...ji,...j->...i", np.conj(state.frame), g)


def curvature_density(state: HessianState, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    (1/C(n,k)) [ sum_ij c_ij (|x_i|^2 |y_j|^2 + |y_i|^2 |x_j|^2)/2 - Re(x_i conj(y_i) y_j conj(x_j))
                 - (Im sum_i sigma_{k-1,i} conj(x_i) y_i)^2 / sigma_k ]
    """
    n, k = state.n, state.k
    c = lemma22_matrix(k, state.lam)
    ax = np.abs(x) ** 2
    ay = np.abs(y) ** 2
    cross = x * np.conj(y)
    bracket = 0.5 * (ax[..., :, None] * ay[..., None, :] + ay[..., :, None] * ax[..., None, :])
    bracket = bracket - (cross[..., :, None] * np.conj(cross[..., None, :])).real
    imag = np.sum(state.derivs * (np.conj(x) * y), axis=-1).imag
    return (np.sum(c * bracket, axis=(-1, -2)) - imag ** 2 / state.sigma_k) / comb(n, k)


def curvature_form(u: PotentialField, X: TangentVector, Y: TangentVector, k: int) -> float:
    """Closed-form sectional pairing <R(u_t, u_s) u_s, u_t> (non-positive)."""
    _same_base(u, X, Y)
    state = evaluate_state(u, k)
    x = frame_components(state, X.value.data)
    y = frame_components(state, Y.value.data)
    return integrate(u.background, curvature_density(state, x, y))


def curvature_bruteforce(u: PotentialField, X: TangentVector, Y: TangentVector, k: int, h: float = 1e-3) -> float:
    """
    Oracle: finite-difference the connection on u + tX + sY and pair
    R eta = D_t D_s eta - D_s D_t eta (eta = u_s = Y) with u_t = X.
    """
    _same_base(u, X, Y)
    bg = u.background
    a, b = X.value.data, Y.value.data
    for _ in range(10):
        try:
            plus_t = state_from_array(bg, u.data + h * a, k)
            minus_t = state_from_array(bg, u.data - h * a, k)
            plus_s = state_from_array(bg, u.data + h * b, k)
            minus_s = state_from_array(bg, u.data - h * b, k)
            break
        except ConeError:
            h *= 0.5
            logger.warning(f"⚠️ Curvature family left the cone; shrinking h to {h:.3g}")
    else:
        raise SolverError("curvature family inadmissible for every step")
    state = evaluate_state(u, k)
    q_yy = gradient_pairing(state, b, b)
    q_xy = gradient_pairing(state, a, b)
    dt_q_yy = (gradient_pairing(plus_t, b, b) - gradient_pairing(minus_t, b, b)) / (2.0 * h)
    ds_q_xy = (gradient_pairing(plus_s, a, b) - gradient_pairing(minus_s, a, b)) / (2.0 * h)
    r_eta = -dt_q_yy + gradient_pairing(state, a, q_yy) + ds_q_xy - gradient_pairing(state, b, q_xy)
    return integrate(bg, r_eta * a * state.ratio)


def classical_curvature(u: PotentialField, X: TangentVector, Y: TangentVector) -> float:
    """k = n oracle: -int (Im dX^H omega_u^-1 dY)^2 det(omega^-1 omega_u) dV."""
    _same_base(u, X, Y)
    bg = u.background
    omega_u = bg.omega + complex_hessian(bg, u)
    inv = np.linalg.inv(omega_u)
    det = np.linalg.det(omega_u).real / bg.volume
    gx = complex_gradient(bg, X.value.data)
    gy = complex_gradient(bg, Y.value.data)
    pairing = np.einsum("...i,...ij,...j->...", np.conj(gx), inv, gy)
    return -integrate(bg, pairing.imag ** 2 * det)


def curvature_scale(u: PotentialField, X: TangentVector, Y: TangentVector) -> float:
    """int |dX|^2_omega |dY|^2_omega dV: the problem scale of the non-positivity tolerance."""
    bg = u.background
    gx = complex_gradient(bg, X.value.data)
    gy = complex_gradient(bg, Y.value.data)
    nx = np.einsum("...i,ij,...j->...", np.conj(gx), bg.omega_inv, gx).real
    ny = np.einsum("...i,ij,...j->...", np.conj(gy), bg.omega_inv, gy).real
    return integrate(bg, nx * ny)


def exact_point_density(lam: Sequence[float], x: Sequence[complex], y: Sequence[complex], k: int) -> Fraction:
    """Curvature density at one point in rational arithmetic (inputs converted without rounding)."""
    lam_q = to_exact(lam)
    n = len(lam_q)
    xr = [(Fraction(float(v.real)), Fraction(float(v.imag))) for v in np.asarray(x, dtype=complex)]
    yr = [(Fraction(float(v.real)), Fraction(float(v.imag))) for v in np.asarray(y, dtype=complex)]
    c = lemma22_matrix(k, lam_q)
    d = sigma_derivatives(k, lam_q)
    s_k = sigma_table(lam_q, k)[k]

    def abs2(z):
        return z[0] * z[0] + z[1] * z[1]

    def mul_conj(z, w):
        # z * conj(w)
        return (z[0] * w[0] + z[1] * w[1], z[1] * w[0] - z[0] * w[1])

    total = Fraction(0)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            cross_i = mul_conj(xr[i], yr[i])
            cross_j = mul_conj(xr[j], yr[j])
            re = cross_i[0] * cross_j[0] + cross_i[1] * cross_j[1]
            bracket = (abs2(xr[i]) * abs2(yr[j]) + abs2(yr[i]) * abs2(xr[j])) / 2 - re
            total += c[i, j] * bracket
    imag = Fraction(0)
    for i in range(n):
        imag += d[i] * mul_conj(yr[i], xr[i])[1]
    return (total - imag * imag / s_k) / int(comb(n, k, exact=True))


def curvature_sample(
    background: TorusBackground, k: int, rng: np.random.Generator, amplitude: float = 0.02, max_wave: int = 1
) -> Tuple[PotentialField, TangentVector, TangentVector]:
    u = random_potential(background, rng, amplitude, count=4, max_wave=max_wave, role="phi")
    X = TangentVector(u, random_potential(background, rng, 1.0, count=3, max_wave=max_wave))
    Y = TangentVector(u, random_potential(background, rng, 1.0, count=3, max_wave=max_wave))
    return u, X, Y


def curvature_record(
    sample_id: int, background: TorusBackground, k: int, rng: np.random.Generator, rtol: float = 1e-10
) -> CurvatureRecord:
    """One curvature sweep row; near-zero positive densities are re-verified exactly."""
    u, X, Y = curvature_sample(background, k, rng)
    state = evaluate_state(u, k)
    x = frame_components(state, X.value.data)
    y = frame_components(state, Y.value.data)
    density = curvature_density(state, x, y)
    value = integrate(background, density)
    scale = curvature_scale(u, X, Y)
    suspicious = np.argwhere(density > 0)
    for idx in map(tuple, suspicious):
        exact = exact_point_density(state.lam[idx], x[idx], y[idx], k)
        if exact > 0:
            logger.error(f"❌ Positive curvature density at {idx}: {float(exact):.3e}")
    return CurvatureRecord(sample_id=sample_id, n=background.n, k=k, value=value, bound_margin=rtol * scale - value)
