"""
Potentials on flat Kähler tori and the pointwise geometry of omega_phi.

Grid
    The complex coordinate z_j = x_j + i y_j is sampled on an N x N real grid
    (N x 1 when `collapse_imag` is set, i.e. for fields independent of Im z_j).
    Real axes are ordered (x1, y1, x2, y2, ...). Derivatives are Fourier
    multipliers with  d_j = (d/dx_j - i d/dy_j) / 2.

Forms
    A (1,1)-form is stored as a Hermitian matrix field [..., i, j] holding the
    (i, j-bar) coefficient. Wedge integrands are ratios to omega^n, so that
    omega_phi^k ^ omega^(n-k) / omega^n = sigma_k(lam) / C(n, k), and the
    volume is V = det(omega).
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import comb

from app.models.schemas import PotentialSpec, SolveConfig
from app.services.errors import DomainError, GridMismatchError
from app.services.symcone import require_cone, sigma_derivatives, sigma_table

logger = logging.getLogger(__name__)

ROLES = ("phi", "F", "psi", "generic")


def _axis_wavenumbers(m: int, zero_nyquist: bool) -> np.ndarray:
    k = 2.0 * np.pi * np.fft.fftfreq(m, d=1.0 / m)
    if zero_nyquist and m % 2 == 0:
        k[m // 2] = 0.0
    return k


# ---------- Background ----------

@dataclass(frozen=True, eq=False)
class TorusBackground:
    """Flat torus C^n / Z^2n with a constant Kähler form omega."""

    n: int
    N: int
    collapse_imag: bool = False
    omega: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.n < 1:
            raise DomainError(f"complex dimension must be >= 1, got {self.n}")
        if self.N < 4:
            raise DomainError(f"grid resolution must be >= 4 per axis, got {self.N}")
        omega = np.eye(self.n, dtype=complex) if self.omega is None else np.array(self.omega, dtype=complex)
        if omega.shape != (self.n, self.n):
            raise DomainError(f"omega must be {self.n}x{self.n}, got {omega.shape}")
        if not np.allclose(omega, omega.conj().T, atol=1e-12):
            raise DomainError("omega must be Hermitian")
        try:
            np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as exc:
            raise DomainError("omega must be positive definite") from exc
        omega.setflags(write=False)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def from_config(cls, config: SolveConfig) -> "TorusBackground":
        omega = None
        if config.omega is not None or config.omega_imag is not None:
            real = np.array(config.omega if config.omega is not None else np.eye(config.n), dtype=float)
            imag = np.array(config.omega_imag if config.omega_imag is not None else np.zeros((config.n, config.n)))
            omega = real + 1j * imag
        return cls(n=config.n, N=config.N, collapse_imag=config.collapse_imag, omega=omega)

    # ---------- Grid ----------

    @property
    def shape(self) -> Tuple[int, ...]:
        y = 1 if self.collapse_imag else self.N
        return tuple(m for _ in range(self.n) for m in (self.N, y))

    @property
    def axes(self) -> Tuple[int, ...]:
        return tuple(range(2 * self.n))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def volume(self) -> float:
        return float(np.linalg.det(self.omega).real)

    @cached_property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.omega)

    @cached_property
    def chol_inv(self) -> np.ndarray:
        return np.linalg.inv(self.chol)

    @cached_property
    def omega_inv(self) -> np.ndarray:
        return np.linalg.inv(self.omega)

    def coordinates(self) -> List[np.ndarray]:
        """Broadcastable real coordinates in [0, 1), one array per real axis."""
        coords = []
        for a, m in enumerate(self.shape):
            shape = [1] * len(self.shape)
            shape[a] = m
            coords.append((np.arange(m) / m).reshape(shape))
        return coords

    def _wavenumbers(self, a: int, zero_nyquist: bool) -> np.ndarray:
        shape = [1] * len(self.shape)
        shape[a] = self.shape[a]
        return _axis_wavenumbers(self.shape[a], zero_nyquist).reshape(shape)

    @cached_property
    def d_multipliers(self) -> List[np.ndarray]:
        """Fourier symbols of d_j."""
        return [
            (1j * self._wavenumbers(2 * j, True) + self._wavenumbers(2 * j + 1, True)) / 2.0
            for j in range(self.n)
        ]

    @cached_property
    def hessian_multipliers(self) -> np.ndarray:
        """Fourier symbols of d_i dbar_j, shape grid + (n, n)."""
        mult = np.zeros(self.shape + (self.n, self.n), dtype=complex)
        dbar = [-np.conj(d) for d in self.d_multipliers]
        for i in range(self.n):
            for j in range(self.n):
                if i == j:
                    kx = self._wavenumbers(2 * i, False)
                    ky = self._wavenumbers(2 * i + 1, False)
                    mult[..., i, i] = np.broadcast_to(-(kx ** 2 + ky ** 2) / 4.0, self.shape)
                else:
                    mult[..., i, j] = np.broadcast_to(self.d_multipliers[i] * dbar[j], self.shape)
        return mult

    @cached_property
    def laplace_symbol(self) -> np.ndarray:
        """Symbol of Delta_omega u = tr(omega^-1 ddbar u) (non-positive, zero at the constant mode)."""
        return np.einsum("ij,...ji->...", self.omega_inv, self.hessian_multipliers).real

    # ---------- Comparisons ----------

    def matches(self, other: "TorusBackground") -> bool:
        return (
            self.n == other.n
            and self.N == other.N
            and self.collapse_imag == other.collapse_imag
            and np.allclose(self.omega, other.omega, rtol=0.0, atol=1e-14)
        )

    def require_match(self, other: "TorusBackground") -> None:
        if not self.matches(other):
            raise GridMismatchError(
                f"background mismatch: (n={self.n}, N={self.N}, collapse={self.collapse_imag}) "
                f"vs (n={other.n}, N={other.N}, collapse={other.collapse_imag})"
            )

    def describe(self) -> dict:
        return {
            "n": self.n,
            "N": self.N,
            "collapse_imag": self.collapse_imag,
            "omega_real": self.omega.real.tolist(),
            "omega_imag": self.omega.imag.tolist(),
            "volume": self.volume,
        }


# ---------- Fields ----------

@dataclass
class PotentialField:
    """Real scalar field on a torus grid (phi, F, psi or generic)."""

    background: TorusBackground
    data: np.ndarray
    role: str = "generic"

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != self.background.shape:
            raise GridMismatchError(f"field shape {self.data.shape} != grid shape {self.background.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("field has non-finite values")
        if self.role not in ROLES:
            raise DomainError(f"unknown field role '{self.role}'")

    def with_data(self, data: np.ndarray, role: Optional[str] = None) -> "PotentialField":
        return PotentialField(self.background, data, role or self.role)

    @property
    def sup(self) -> float:
        return float(np.max(self.data))

    @property
    def inf(self) -> float:
        return float(np.min(self.data))

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.data)))


FieldLike = Union[PotentialField, np.ndarray]


def zeros(background: TorusBackground, role: str = "generic") -> PotentialField:
    return PotentialField(background, np.zeros(background.shape), role)


def field_data(background: TorusBackground, u: FieldLike) -> np.ndarray:
    """Raw array of u, checked against the background grid."""
    if isinstance(u, PotentialField):
        background.require_match(u.background)
        return u.data
    data = np.asarray(u, dtype=float)
    if data.shape != background.shape:
        raise GridMismatchError(f"field shape {data.shape} != grid shape {background.shape}")
    return data


def _like(background: TorusBackground, u: FieldLike, data: np.ndarray, role: str = "generic") -> FieldLike:
    return PotentialField(background, data, role) if isinstance(u, PotentialField) else data


def integrate(background: TorusBackground, f: np.ndarray) -> float:
    """Uniform-weight quadrature of f dV, dV = omega^n (fixed-order compensated sum)."""
    f = np.asarray(f, dtype=float)
    return background.volume * math.fsum(np.ravel(f, order="C")) / f.size


def mean(background: TorusBackground, f: np.ndarray) -> float:
    f = np.asarray(f, dtype=float)
    return math.fsum(np.ravel(f, order="C")) / f.size


# ---------- Test data ----------

def potential_from_modes(
    background: TorusBackground,
    modes: Iterable[Tuple[float, Sequence[int], float]],
    role: str = "generic",
) -> PotentialField:
    """Sum of coefficient * cos(2 pi <wave, x> + phase) over the given modes."""
    coords = background.coordinates()
    data = np.zeros(background.shape)
    for coefficient, wave, phase in modes:
        wave = list(wave)
        if len(wave) != 2 * background.n:
            raise DomainError(f"wave vector needs {2 * background.n} entries, got {len(wave)}")
        if background.collapse_imag and any(wave[1::2]):
            raise DomainError("collapsed grid: wave vectors must vanish on the Im z axes")
        arg = sum(w * x for w, x in zip(wave, coords)) * 2.0 * np.pi + phase
        data = data + coefficient * np.cos(arg)
    return PotentialField(background, data, role)


def random_modes(
    background: TorusBackground, rng: np.random.Generator, count: int, max_wave: int = 1
) -> List[Tuple[float, List[int], float]]:
    modes = []
    active = [a for a in range(2 * background.n) if not (background.collapse_imag and a % 2)]
    while len(modes) < count:
        wave = [0] * (2 * background.n)
        for a in active:
            wave[a] = int(rng.integers(-max_wave, max_wave + 1))
        if not any(wave):
            continue
        modes.append((float(rng.normal()), wave, float(rng.uniform(0.0, 2.0 * np.pi))))
    return modes


def random_potential(
    background: TorusBackground,
    rng: np.random.Generator,
    amplitude: float,
    count: int = 4,
    max_wave: int = 1,
    role: str = "generic",
) -> PotentialField:
    """Smooth band-limited field with sup-norm `amplitude`."""
    raw = potential_from_modes(background, random_modes(background, rng, count, max_wave), role).data
    scale = np.max(np.abs(raw))
    data = raw * (amplitude / scale) if scale > 0 else raw
    return PotentialField(background, data, role)


def potential_from_spec(
    background: TorusBackground, spec: PotentialSpec, rng: Optional[np.random.Generator] = None, role: str = "phi"
) -> PotentialField:
    data = potential_from_modes(background, [(m.coefficient, m.wave, m.phase) for m in spec.modes]).data
    if spec.random_modes:
        if rng is None:
            raise DomainError("random modes need a seeded generator")
        data = data + random_potential(background, rng, spec.amplitude, spec.random_modes, spec.max_wave).data
    return PotentialField(background, data + spec.shift, role)


# ---------- Differentiation ----------

def complex_hessian(background: TorusBackground, u: FieldLike) -> np.ndarray:
    """
    ddbar u as a Hermitian matrix field, shape grid + (n, n).

    Spectral differentiation: exact for band-limited fields below the Nyquist mode.
    """
    data = field_data(background, u)
    u_hat = np.fft.fftn(data, axes=background.axes)
    H = np.fft.ifftn(background.hessian_multipliers * u_hat[..., None, None], axes=background.axes)
    H = 0.5 * (H + np.conj(np.swapaxes(H, -1, -2)))
    return H


def complex_gradient(background: TorusBackground, u: FieldLike) -> np.ndarray:
    """(d_1 u, ..., d_n u), shape grid + (n,)."""
    data = field_data(background, u)
    u_hat = np.fft.fftn(data, axes=background.axes)
    out = np.empty(background.shape + (background.n,), dtype=complex)
    for j, mult in enumerate(background.d_multipliers):
        out[..., j] = np.fft.ifftn(mult * u_hat, axes=background.axes)
    return out


def apply_laplace_omega(background: TorusBackground, u: FieldLike, scale: float = 1.0) -> np.ndarray:
    data = field_data(background, u)
    u_hat = np.fft.fftn(data, axes=background.axes)
    return np.fft.ifftn(scale * background.laplace_symbol * u_hat, axes=background.axes).real


def solve_laplace_omega(background: TorusBackground, rhs: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """
    Mean-zero solution of  scale * Delta_omega u = rhs - mean(rhs)  (pseudo-inverse).
    """
    rhs_hat = np.fft.fftn(np.asarray(rhs, dtype=float), axes=background.axes)
    symbol = scale * background.laplace_symbol
    inv = np.zeros_like(symbol)
    nonzero = np.abs(symbol) > 1e-12
    inv[nonzero] = 1.0 / symbol[nonzero]
    return np.fft.ifftn(inv * rhs_hat, axes=background.axes).real


# ---------- Pointwise state ----------

@dataclass
class HessianState:
    """Per-point data of an admissible potential: lam, sigma_j, ratio and G."""

    background: TorusBackground
    k: int
    phi: np.ndarray
    hessian: np.ndarray
    lam: np.ndarray
    frame: np.ndarray
    sigmas: np.ndarray
    derivs: np.ndarray
    G: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.background.n

    @property
    def sigma_k(self) -> np.ndarray:
        return self.sigmas[..., self.k]

    @property
    def ratio(self) -> np.ndarray:
        """omega_phi^k ^ omega^(n-k) / omega^n."""
        return self.sigma_k / comb(self.n, self.k)

    @property
    def F(self) -> np.ndarray:
        return np.log(self.ratio)

    @property
    def omega_phi(self) -> np.ndarray:
        return self.background.omega + self.hessian

    @property
    def det_G(self) -> np.ndarray:
        """det(G) relative to omega: prod_i sigma_{k-1,i} / sigma_k."""
        return np.prod(self.derivs / self.sigma_k[..., None], axis=-1)


def _state_from_hessian(
    background: TorusBackground, phi: np.ndarray, H: np.ndarray, k: int, eps: float
) -> HessianState:
    n = background.n
    if not 1 <= k <= n:
        raise DomainError(f"k={k} outside 1..{n}")
    Linv = background.chol_inv
    M = Linv @ (background.omega + H) @ Linv.conj().T
    lam, U = np.linalg.eigh(M)
    require_cone(lam, k, eps, what="omega_phi eigenvalues")
    sigmas = sigma_table(lam, n)
    derivs = sigma_derivatives(k, lam)
    frame = Linv.conj().T @ U
    weights = derivs / sigmas[..., k][..., None]
    G = (frame * weights[..., None, :]) @ np.conj(np.swapaxes(frame, -1, -2))
    return HessianState(background, k, phi, H, lam, frame, sigmas, derivs, G)


def evaluate_state(phi: PotentialField, k: int, eps: float = 0.0) -> HessianState:
    """
    Assemble the pointwise state of phi.

    Args:
        phi: potential; must satisfy cone_class >= k at every grid point
        k: Hessian degree
        eps: admissibility margin (0 for classification, >0 inside solvers)

    Returns:
        HessianState with G = P diag(sigma_{k-1,i}/sigma_k) P^H, P = L^-H U

    Raises:
        ConeError: carrying the worst grid point and its eigenvalues
    """
    bg = phi.background
    return _state_from_hessian(bg, phi.data, complex_hessian(bg, phi), k, eps)


def state_from_array(background: TorusBackground, data: np.ndarray, k: int, eps: float = 0.0) -> HessianState:
    return evaluate_state(PotentialField(background, data, "phi"), k, eps)


def trace_G(state: HessianState, form: np.ndarray) -> np.ndarray:
    """tr_G of a (1,1)-form field (or a constant n x n form)."""
    return np.einsum("...ij,...ji->...", state.G, np.broadcast_to(form, state.G.shape)).real


def laplace_G(state: HessianState, u: FieldLike) -> FieldLike:
    """Delta_G u = G^{i jbar} d_i dbar_j u (raw pointwise contraction)."""
    data = field_data(state.background, u)
    return _like(state.background, u, trace_G(state, complex_hessian(state.background, data)))


def gradient_pairing(state: HessianState, a: FieldLike, b: FieldLike) -> np.ndarray:
    """Q(a, b) = Re(db^H G da); Q(a, a) = |da|^2_G."""
    ga = complex_gradient(state.background, a)
    gb = complex_gradient(state.background, b)
    return np.einsum("...i,...ij,...j->...", np.conj(gb), state.G, ga).real


def generalized_ricci(source: Union[HessianState, PotentialField], k: Optional[int] = None) -> np.ndarray:
    """-ddbar log(omega_phi^k ^ omega^(n-k) / omega^n) + Ric(omega), with Ric(omega) = 0 on the flat torus."""
    state = source if isinstance(source, HessianState) else evaluate_state(source, k)
    return -complex_hessian(state.background, state.F)


def classical_ricci(phi: PotentialField) -> np.ndarray:
    """-ddbar log det(omega^-1 omega_phi), computed with determinants only."""
    bg = phi.background
    det = np.linalg.det(bg.omega + complex_hessian(bg, phi)).real / bg.volume
    if np.any(det <= 0):
        raise DomainError("omega_phi is not positive")
    return -complex_hessian(bg, np.log(det))


def generalized_scalar_curvature(state: HessianState) -> np.ndarray:
    """tr_G of the generalized Ricci form."""
    return trace_G(state, generalized_ricci(state))


def selfadjoint_defect(state: HessianState, weighted: bool = True) -> float:
    """
    Relative asymmetry ||S - S^T|| / ||S|| of the assembled Delta_G matrix,
    S = diag(w) A with w = ratio (weighted) or w = 1. Dense: low resolutions only.
    """
    bg = state.background
    size = bg.size
    A = np.empty((size, size))
    unit = np.zeros(size)
    for col in range(size):
        unit[:] = 0.0
        unit[col] = 1.0
        A[:, col] = np.ravel(laplace_G(state, unit.reshape(bg.shape)))
    w = np.ravel(state.ratio) if weighted else np.ones(size)
    S = w[:, None] * A
    return float(np.linalg.norm(S - S.T) / np.linalg.norm(S))


# ---------- Wedge products ----------

FormLike = Union[str, HessianState, np.ndarray]


def relative_form(background: TorusBackground, form: FormLike) -> np.ndarray:
    """L^-1 form L^-H: the form expressed against omega (eigenvalues of omega^-1 form)."""
    if isinstance(form, str):
        if form != "omega":
            raise DomainError(f"unknown form '{form}'")
        return np.eye(background.n, dtype=complex)
    matrix = form.omega_phi if isinstance(form, HessianState) else np.asarray(form, dtype=complex)
    Linv = background.chol_inv
    return Linv @ matrix @ Linv.conj().T


def mixed_discriminant(mats: Sequence[np.ndarray]) -> np.ndarray:
    """
    D(A_1, ..., A_n) with D(A, ..., A) = det A, by polarization over subsets.
    """
    n = len(mats)
    mats = np.broadcast_arrays(*[np.asarray(m, dtype=complex) for m in mats])
    total = np.zeros(mats[0].shape[:-2], dtype=complex)
    for size in range(1, n + 1):
        sign = (-1) ** (n - size)
        for subset in combinations(range(n), size):
            total = total + sign * np.linalg.det(sum(mats[i] for i in subset))
    return (total / math.factorial(n)).real


def wedge_density(background: TorusBackground, factors: Sequence[Tuple[FormLike, int]]) -> np.ndarray:
    """Pointwise (form_1^p_1 ^ ... ) / omega^n for total degree n."""
    degree = sum(power for _, power in factors)
    if degree != background.n:
        raise DomainError(f"wedge degree {degree} != n = {background.n}")
    mats = []
    for form, power in factors:
        if power < 0:
            raise DomainError("negative wedge power")
        mats.extend([relative_form(background, form)] * power)
    return mixed_discriminant(mats)


def wedge_integral(
    background: TorusBackground, factors: Sequence[Tuple[FormLike, int]], weight: Optional[np.ndarray] = None
) -> float:
    """integral of weight * form_1^p_1 ^ ... ^ form_m^p_m over the torus."""
    density = np.broadcast_to(wedge_density(background, factors), background.shape)
    if weight is not None:
        density = density * field_data(background, weight)
    return integrate(background, density)


# ---------- Twisting forms ----------

@dataclass
class TwistForm:
    """Smooth (1,1)-form alpha (constant n x n or a matrix field)."""

    background: TorusBackground
    alpha: np.ndarray

    def __post_init__(self) -> None:
        self.alpha = np.asarray(self.alpha, dtype=complex)
        shape = (self.background.n, self.background.n)
        if self.alpha.shape not in (shape, self.background.shape + shape):
            raise GridMismatchError(f"alpha shape {self.alpha.shape} incompatible with the grid")

    @classmethod
    def zero(cls, background: TorusBackground) -> "TwistForm":
        return cls(background, np.zeros((background.n, background.n), dtype=complex))

    @classmethod
    def scaled_omega(cls, background: TorusBackground, c: float) -> "TwistForm":
        return cls(background, c * background.omega)

    @property
    def values(self) -> np.ndarray:
        return np.broadcast_to(self.alpha, self.background.shape + (self.background.n,) * 2)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.alpha)

    def sup_norm(self) -> float:
        """sup |alpha|_omega, the Hilbert-Schmidt norm of omega^-1 alpha."""
        rel = relative_form(self.background, self.values)
        return float(np.max(np.sqrt(np.einsum("...ij,...ji->...", rel, rel).real.clip(min=0.0))))

    def scaled(self, s: float) -> "TwistForm":
        return TwistForm(self.background, s * self.alpha)


def alpha_bar(state: HessianState, twist: TwistForm) -> float:
    """
    k * int alpha ^ omega_phi^(k-1) ^ omega^(n-k) / int omega_phi^k ^ omega^(n-k).

    The unique constant for which  Delta_G F = tr_G alpha - alpha_bar  is solvable.
    """
    state.background.require_match(twist.background)
    weighted = trace_G(state, twist.values) * state.ratio
    return integrate(state.background, weighted) / integrate(state.background, state.ratio)
