"""
Hessian Mabuchi energy on the flat torus.

    mu_k(phi) = entropy_term - j_term - twist_term

    entropy_term = 1/V int (f + lam phi) s_k
    j_term       = lam / (V (k+1)) int phi sum_{j=0..k} s_{k-j}
    twist_term   = 1/V int phi sum_{j=1..k} (Ric(omega) - lam omega) ^ omega_phi^(k-j) ^ omega^(n-k+j-1) / omega^n

with s_j = sigma_j(lam) / C(n, j), f = log s_k and Ric(omega) = 0. The twisted
energy replaces Ric(omega) by alpha and uses lam = alpha_bar / k.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import comb

from app.models.schemas import EnergyReport, VariationReport
from app.services.errors import DomainError
from app.services.symcone import sigma_derivatives
from app.services.torusfield import (
    HessianState,
    PotentialField,
    TorusBackground,
    TwistForm,
    alpha_bar,
    complex_gradient,
    complex_hessian,
    evaluate_state,
    field_data,
    generalized_ricci,
    gradient_pairing,
    integrate,
    laplace_G,
    trace_G,
    wedge_density,
    zeros,
)

logger = logging.getLogger(__name__)


# ---------- Paths ----------

@dataclass
class PotentialPath:
    """Admissible potentials phi_t sampled at uniformly spaced times."""

    samples: List[PotentialField]
    times: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        if len(self.samples) != len(self.times):
            raise DomainError("one sample per time is required")
        if len(self.samples) < 2:
            raise DomainError("a path needs at least two samples")
        bg = self.samples[0].background
        for sample in self.samples[1:]:
            bg.require_match(sample.background)
        steps = np.diff(self.times)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise DomainError("path times must be increasing with a uniform step")

    @classmethod
    def sample(cls, fn: Callable[[float], np.ndarray], background: TorusBackground, times: Sequence[float]) -> "PotentialPath":
        return cls([PotentialField(background, fn(float(t)), "phi") for t in times], np.asarray(times, dtype=float))

    @property
    def background(self) -> TorusBackground:
        return self.samples[0].background

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    def __len__(self) -> int:
        return len(self.samples)

    def velocity(self, i: int) -> np.ndarray:
        """Centered difference (phi_{i+1} - phi_{i-1}) / 2h."""
        return (self.samples[i + 1].data - self.samples[i - 1].data) / (2.0 * self.step)

    def acceleration(self, i: int) -> np.ndarray:
        return (self.samples[i + 1].data - 2.0 * self.samples[i].data + self.samples[i - 1].data) / self.step ** 2

    def coarsened(self) -> "PotentialPath":
        """Every other sample: the same path at step 2h."""
        return PotentialPath(self.samples[::2], self.times[::2])


# ---------- Energy ----------

@dataclass
class EntropyTerms:
    A_F: float
    entropy: float
    log_A_F: float


def entropy_A(F: np.ndarray, n: int, k: int, background: Optional[TorusBackground] = None) -> EntropyTerms:
    """
    A_F = int exp(nF/k) sqrt(F^2 + 1) dV and the entropy int exp(nF/k) |F| dV.

    The exponential is shifted by its maximum before summation; A_F itself
    overflows to inf only when log_A_F exceeds the float range.
    """
    if isinstance(F, PotentialField):
        background = background or F.background
        F = F.data
    if background is None:
        raise DomainError("entropy_A needs a background for array input")
    F = field_data(background, F)
    exponent = (n / k) * F
    shift = float(np.max(exponent))
    weight = np.exp(exponent - shift)
    a_scaled = integrate(background, weight * np.sqrt(F ** 2 + 1.0))
    e_scaled = integrate(background, weight * np.abs(F))
    log_a = shift + math.log(a_scaled)
    return EntropyTerms(
        A_F=math.exp(log_a) if log_a < 700 else math.inf,
        entropy=e_scaled * math.exp(shift) if shift < 700 else math.inf,
        log_A_F=log_a,
    )


def _normalized_sigmas(state: HessianState) -> np.ndarray:
    n = state.n
    return state.sigmas / np.array([comb(n, j) for j in range(n + 1)])


def mixed_alpha_density(state: HessianState, alpha: np.ndarray, m: int) -> np.ndarray:
    """alpha ^ omega_phi^m ^ omega^(n-1-m) / omega^n = sum_i alpha~_ii sigma_{m,i} / (n C(n-1, m))."""
    n = state.n
    frame_alpha = np.einsum(
        "...ji,...jk,...ki->...i", np.conj(state.frame), np.broadcast_to(alpha, state.G.shape), state.frame
    ).real
    sig_m = sigma_derivatives(m + 1, state.lam)
    return np.sum(frame_alpha * sig_m, axis=-1) / (n * comb(n - 1, m))


def _report(state: HessianState, lam: float, entropy_term: float, j_term: float, twist_term: float) -> EnergyReport:
    terms = entropy_A(state.F, state.n, state.k, state.background)
    return EnergyReport(
        mu_k=entropy_term - j_term - twist_term,
        entropy_term=entropy_term,
        j_term=j_term,
        twist_term=twist_term,
        lam=lam,
        A_F=terms.A_F,
        entropy=terms.entropy,
        sup_phi=float(np.max(np.abs(state.phi))),
        sup_F=float(np.max(np.abs(state.F))),
    )


def mu_k(phi: PotentialField, lam: float, k: int, state: Optional[HessianState] = None) -> EnergyReport:
    """
    Hessian Mabuchi energy with its three-part decomposition.

    Args:
        phi: admissible potential
        lam: the free constant lambda (0 is the natural choice on the torus)
        k: Hessian degree
        state: pre-assembled state of phi, if available

    Returns:
        EnergyReport, mu_k = entropy_term - j_term - twist_term
    """
    state = state or evaluate_state(phi, k)
    bg = state.background
    V = bg.volume
    s = _normalized_sigmas(state)
    ratio = s[..., k]
    entropy_term = integrate(bg, (state.F + lam * state.phi) * ratio) / V
    j_sum = sum(s[..., k - j] for j in range(k + 1))
    j_term = lam / (V * (k + 1)) * integrate(bg, state.phi * j_sum)
    twist_sum = sum(s[..., k - j] for j in range(1, k + 1))
    twist_term = -lam / V * integrate(bg, state.phi * twist_sum)
    return _report(state, lam, entropy_term, j_term, twist_term)


def twist_lambda(background: TorusBackground, twist: TwistForm, k: int) -> float:
    """lam = alpha_bar / k (alpha_bar is cohomological, evaluated at phi = 0)."""
    return alpha_bar(evaluate_state(zeros(background, "phi"), k), twist) / k


def mu_k_twisted(phi: PotentialField, twist: TwistForm, k: int, state: Optional[HessianState] = None) -> EnergyReport:
    """Closed form of the alpha-twisted energy: Ric(omega) replaced by alpha, lam = alpha_bar / k."""
    state = state or evaluate_state(phi, k)
    bg = state.background
    lam = twist_lambda(bg, twist, k)
    base = mu_k(phi, lam, k, state)
    if twist.is_zero:
        return base
    alpha_sum = sum(mixed_alpha_density(state, twist.values, k - j) for j in range(1, k + 1))
    twist_term = base.twist_term + integrate(bg, state.phi * alpha_sum) / bg.volume
    return _report(state, lam, base.entropy_term, base.j_term, twist_term)


def mu_k_twisted_line_integral(
    phi: PotentialField, twist: TwistForm, k: int, intervals: int = 16
) -> float:
    """Oracle: integrate the first variation along s phi, s in [0, 1], by composite Simpson."""
    if intervals < 2 or intervals % 2:
        raise DomainError("Simpson needs an even number of intervals >= 2")
    bg = phi.background
    abar = twist_lambda(bg, twist, k) * k
    values = []
    for s in np.linspace(0.0, 1.0, intervals + 1):
        state = evaluate_state(phi.with_data(s * phi.data), k)
        values.append(first_variation(state, phi.data, abar / k, twist))
    weights = np.ones(intervals + 1)
    weights[1:-1:2] = 4.0
    weights[2:-1:2] = 2.0
    return float(np.dot(weights, values) / (3.0 * intervals))


def classical_k_energy(phi: PotentialField) -> float:
    """1/V int log det(omega^-1 omega_phi) det(omega^-1 omega_phi) dV, determinants only."""
    bg = phi.background
    det = np.linalg.det(bg.omega + complex_hessian(bg, phi)).real / bg.volume
    if np.any(det <= 0):
        raise DomainError("omega_phi is not positive")
    return integrate(bg, det * np.log(det)) / bg.volume


# ---------- Variations ----------

def first_variation(
    state: HessianState, phidot: np.ndarray, lam: float, twist: Optional[TwistForm] = None
) -> float:
    """
    1/V int phidot (Delta_G f + lam k - tr_G alpha) s_k dV.

    Equals -(k/V) int phidot (Ric(omega_phi) - lam omega_phi) ^ omega_phi^(k-1) ^ omega^(n-k)
    when alpha = 0.
    """
    bg = state.background
    phidot = field_data(bg, phidot)
    bracket = laplace_G(state, state.F) + lam * state.k
    if twist is not None and not twist.is_zero:
        bracket = bracket - trace_G(state, twist.values)
    return integrate(bg, phidot * bracket * state.ratio) / bg.volume


def second_variation_terms(
    state: HessianState, phidot: np.ndarray, phiddot: np.ndarray, lam: float
) -> Dict[str, float]:
    """
    The four terms of d^2 mu_k / dt^2:

        path      1/V int (phi'' - |d phi'|^2_G)(Delta_G f + lam k) s_k
        laplace   1/V int (Delta_G phi')^2 s_k
        mixed     k(k-1)/V int i d phi' ^ dbar phi' ^ Ric ^ omega_phi^(k-2) ^ omega^(n-k) / omega^n
        gradient  -k/V int |d phi'|^2_G Ric ^ omega_phi^(k-1) ^ omega^(n-k) / omega^n
    """
    bg = state.background
    V = bg.volume
    k = state.k
    phidot = field_data(bg, phidot)
    phiddot = field_data(bg, phiddot)
    grad_sq = gradient_pairing(state, phidot, phidot)
    lap_f = laplace_G(state, state.F)
    ratio = state.ratio
    terms = {
        "path": integrate(bg, (phiddot - grad_sq) * (lap_f + lam * k) * ratio) / V,
        "laplace": integrate(bg, laplace_G(state, phidot) ** 2 * ratio) / V,
        "mixed": 0.0,
        # k Ric ^ omega_phi^(k-1) ^ omega^(n-k) / omega^n = tr_G(Ric) s_k = -Delta_G f s_k
        "gradient": integrate(bg, grad_sq * lap_f * ratio) / V,
    }
    if k >= 2:
        g = complex_gradient(bg, phidot)
        rank_one = g[..., :, None] * np.conj(g[..., None, :])
        density = wedge_density(bg, [(rank_one, 1), (generalized_ricci(state), 1), (state, k - 2), ("omega", bg.n - k)])
        terms["mixed"] = k * (k - 1) * integrate(bg, density) / V
    return terms


def second_variation(state: HessianState, phidot: np.ndarray, phiddot: np.ndarray, lam: float) -> float:
    return math.fsum(second_variation_terms(state, phidot, phiddot, lam).values())


def _fit_order(steps: Sequence[float], residuals: Sequence[float]) -> Optional[float]:
    pairs = [(math.log(h), math.log(r)) for h, r in zip(steps, residuals) if r > 0]
    if len(pairs) < 2:
        return None
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])


def _relative(residuals: Sequence[float], formulas: Sequence[float]) -> float:
    """max residual over the largest formula value along the path (0 when both vanish)."""
    scale = max(abs(f) for f in formulas)
    worst = max(residuals)
    if scale == 0.0:
        return 0.0 if worst == 0.0 else math.inf
    return worst / scale


def _first_variation_residuals(
    path: PotentialPath, lam: float, k: int, twist: Optional[TwistForm]
) -> Tuple[List[float], List[float]]:
    h = path.step
    energy = _energy_fn(lam, k, twist)
    mus = [energy(phi) for phi in path.samples]
    residuals, formulas = [], []
    for i in range(1, len(path) - 1):
        difference = (mus[i + 1] - mus[i - 1]) / (2.0 * h)
        formula = first_variation(evaluate_state(path.samples[i], k), path.velocity(i), lam, twist)
        residuals.append(abs(difference - formula))
        formulas.append(formula)
    return residuals, formulas


def _second_variation_residuals(path: PotentialPath, lam: float, k: int) -> Tuple[List[float], List[float]]:
    h = path.step
    mus = [mu_k(phi, lam, k).mu_k for phi in path.samples]
    residuals, formulas = [], []
    for i in range(1, len(path) - 1):
        difference = (mus[i + 1] - 2.0 * mus[i] + mus[i - 1]) / h ** 2
        state = evaluate_state(path.samples[i], k)
        formula = second_variation(state, path.velocity(i), path.acceleration(i), lam)
        residuals.append(abs(difference - formula))
        formulas.append(formula)
    return residuals, formulas


def _variation_report(
    order: int, path: PotentialPath, residual_fn: Callable[[PotentialPath], Tuple[List[float], List[float]]], min_coarse: int
) -> VariationReport:
    """
    Residuals at step h and, when the path is long enough, at 2h on every other sample;
    the observed order compares the two at the shared times.
    """
    fine, formulas = residual_fn(path)
    steps, residuals, relative = [path.step], [max(fine)], [_relative(fine, formulas)]
    observed = None
    coarse_path = path.coarsened()
    if len(coarse_path) >= min_coarse:
        coarse, coarse_formulas = residual_fn(coarse_path)
        shared = [fine[2 * j - 1] for j in range(1, len(coarse_path) - 1)]
        steps = [coarse_path.step, path.step]
        residuals = [max(coarse), max(shared)]
        relative = [_relative(coarse, coarse_formulas), _relative(fine, formulas)]
        observed = _fit_order(steps, residuals)
    return VariationReport(
        order=order,
        steps=steps,
        residuals=residuals,
        max_residual=max(fine),
        relative_residuals=relative,
        max_relative_residual=relative[-1],
        observed_order=observed,
    )


def verify_first_variation(
    path: PotentialPath, lam: float, k: int, twist: Optional[TwistForm] = None
) -> VariationReport:
    """
    Centered difference of mu_k along the path against the first-variation formula (interior samples).

    Paths with five or more samples also report the observed order from the 2h sub-path.
    """
    if len(path) < 3:
        raise DomainError("first-variation check needs at least three samples")
    if twist is not None and not twist.is_zero:
        lam = twist_lambda(path.background, twist, k)
    return _variation_report(1, path, lambda p: _first_variation_residuals(p, lam, k, twist), 3)


def verify_second_variation(path: PotentialPath, lam: float, k: int) -> VariationReport:
    """Second centered difference of mu_k against the four-term second-variation formula."""
    if len(path) < 5:
        raise DomainError("second-variation check needs at least five samples")
    return _variation_report(2, path, lambda p: _second_variation_residuals(p, lam, k), 5)


def variation_refinement(
    path_fn: Callable[[float], np.ndarray],
    background: TorusBackground,
    lam: float,
    k: int,
    order: int = 1,
    t0: float = 0.5,
    h0: float = 0.05,
    levels: int = 4,
) -> VariationReport:
    """
    Refinement study: rebuild the path around t0 with h = h0 / 2^m and fit the
    observed convergence order of the formula-vs-difference residual.
    """
    if order not in (1, 2):
        raise DomainError("order must be 1 or 2")
    steps, residuals, relative = [], [], []
    for level in range(levels):
        h = h0 / 2 ** level
        offsets = (-1, 0, 1) if order == 1 else (-2, -1, 0, 1, 2)
        path = PotentialPath.sample(path_fn, background, [t0 + m * h for m in offsets])
        check = verify_first_variation(path, lam, k) if order == 1 else verify_second_variation(path, lam, k)
        steps.append(h)
        residuals.append(check.max_residual)
        relative.append(check.max_relative_residual)
        logger.debug(f"variation order={order} h={h:.4g} residual={check.max_residual:.3e}")
    observed = _fit_order(steps, residuals)
    logger.info(f"🔍 {order}-variation refinement (k={k}): residuals {['%.2e' % r for r in residuals]}, order {observed}")
    return VariationReport(
        order=order,
        steps=steps,
        residuals=residuals,
        max_residual=max(residuals),
        relative_residuals=relative,
        max_relative_residual=max(relative),
        observed_order=observed,
    )


def _energy_fn(lam: float, k: int, twist: Optional[TwistForm]) -> Callable[[PotentialField], float]:
    if twist is None or twist.is_zero:
        return lambda phi: mu_k(phi, lam, k).mu_k
    return lambda phi: mu_k_twisted(phi, twist, k).mu_k


def energy_time_series(path: PotentialPath, lam: float, k: int) -> List[Tuple[float, float, float, float]]:
    """Rows (t, mu_k, d mu_k formula, d mu_k difference) at interior samples."""
    h = path.step
    mus = [mu_k(phi, lam, k).mu_k for phi in path.samples]
    rows = []
    for i in range(1, len(path) - 1):
        formula = first_variation(evaluate_state(path.samples[i], k), path.velocity(i), lam)
        difference = (mus[i + 1] - mus[i - 1]) / (2.0 * h)
        rows.append((float(path.times[i]), mus[i], formula, difference))
    return rows
