"""
Elementary symmetric polynomials on eigenvalue vectors and the Gamma_k cone.

Every function accepts a single spectrum (shape (n,)) or a batch (shape (..., n)).
Float arrays are the default; object arrays of `fractions.Fraction` (see `to_exact`)
switch the same code paths to exact rational arithmetic.
"""
import logging
import math
from fractions import Fraction
from itertools import combinations
from typing import Any, Dict, Iterable, Sequence, Tuple, Union

import numpy as np
from scipy.special import comb

from app.services.errors import ConeError, DomainError

logger = logging.getLogger(__name__)

Spectrum = Union[Sequence[float], Sequence[Fraction], np.ndarray]

# Margins used by the solvers' admissibility guard; classification uses 0.
CONE_EPS_CLASSIFY = 0.0
CONE_EPS_SOLVER = 1e-10


def garding_constant(k: int) -> float:
    """Constant c in  sum_i mu_i d sigma_k(lam)/d lam_i >= c sigma_k(mu)^(1/k) sigma_k(lam)^((k-1)/k)."""
    return float(k)


# ---------- Conversions ----------

def to_exact(lam: Spectrum) -> np.ndarray:
    """Object array of Fractions; floats are converted without rounding."""
    arr = np.asarray(lam, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    for idx in np.ndindex(arr.shape):
        value = arr[idx]
        if isinstance(value, Fraction):
            out[idx] = value
        elif isinstance(value, (int, np.integer)):
            out[idx] = Fraction(int(value))
        else:
            out[idx] = Fraction(float(value))
    return out


def is_exact(lam: np.ndarray) -> bool:
    return np.asarray(lam).dtype == object


def _as_spectrum(lam: Spectrum) -> np.ndarray:
    arr = np.asarray(lam)
    if arr.dtype != object:
        arr = arr.astype(float)
        if not np.all(np.isfinite(arr)):
            raise DomainError("eigenvalue vector has non-finite entries")
    if arr.ndim == 0:
        raise DomainError("eigenvalue vector must have at least one axis")
    return arr


def _scalar(value: Any) -> Any:
    if isinstance(value, np.ndarray) and value.ndim == 0:
        value = value[()]
    if isinstance(value, np.floating):
        return float(value)
    return value


# ---------- Elementary symmetric polynomials ----------

def sigma_table(lam: Spectrum, kmax: int) -> np.ndarray:
    """
    All sigma_0..sigma_kmax of lam along the last axis, shape (..., kmax + 1).

    One-row dynamic programme: entries are prepended one at a time, O(n kmax)
    per spectrum. Degrees above the vector length come out as 0.
    """
    lam = _as_spectrum(lam)
    if kmax < 0:
        raise DomainError(f"kmax must be non-negative, got {kmax}")
    n = lam.shape[-1]
    exact = is_exact(lam)
    table = np.zeros(lam.shape[:-1] + (kmax + 1,), dtype=object if exact else float)
    if exact:
        table[...] = Fraction(0)
        table[..., 0] = Fraction(1)
    else:
        table[..., 0] = 1.0
    for i in range(n):
        x = lam[..., i]
        for j in range(min(i + 1, kmax), 0, -1):
            table[..., j] = table[..., j] + x * table[..., j - 1]
    return table


def _sigma_ext(k: int, lam: np.ndarray) -> Any:
    """sigma_k with the conventions sigma_{k<0} = 0 and sigma_{k>len} = 0."""
    if k < 0 or k > lam.shape[-1]:
        zero = Fraction(0) if is_exact(lam) else 0.0
        out = np.empty(lam.shape[:-1], dtype=object if is_exact(lam) else float)
        out[...] = zero
        return out
    return sigma_table(lam, k)[..., k]


def sigma(k: int, lam: Spectrum) -> Any:
    """
    Elementary symmetric polynomial of degree k.

    Args:
        k: degree, 0 <= k <= n (sigma_0 = 1)
        lam: eigenvalue vector(s)

    Returns:
        float/Fraction for a single vector, array for a batch

    Examples:
        sigma(2, [1, 1, 1]) -> 3.0
        sigma(1, [3, -1]) -> 2.0
    """
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    if not 0 <= k <= n:
        raise DomainError(f"sigma degree k={k} outside 0..{n}")
    return _scalar(sigma_table(lam, k)[..., k])


def sigma_enumerate(k: int, lam: Spectrum) -> Any:
    """Subset-enumeration oracle for a single vector (exact if lam is exact)."""
    values = list(np.asarray(lam, dtype=object))
    if k < 0 or k > len(values):
        return 0
    total = Fraction(0) if values and isinstance(values[0], Fraction) else 0.0
    for subset in combinations(values, k):
        prod = Fraction(1) if isinstance(total, Fraction) else 1.0
        for v in subset:
            prod = prod * v
        total = total + prod
    return total


def _check_drop(drop: Iterable[int], n: int) -> Tuple[int, ...]:
    drop = tuple(int(i) for i in drop)
    if len(set(drop)) != len(drop):
        raise DomainError(f"repeated indices in {drop}")
    for i in drop:
        if not 0 <= i < n:
            raise DomainError(f"index {i} outside 0..{n - 1}")
    return drop


def sigma_minus(k: int, drop: Iterable[int], lam: Spectrum) -> Any:
    """sigma_k of lam with the entries at `drop` removed (sigma_{k,i}, sigma_{k,ij})."""
    lam = _as_spectrum(lam)
    drop = _check_drop(drop, lam.shape[-1])
    rest = np.delete(lam, list(drop), axis=-1)
    return _scalar(_sigma_ext(k, rest))


def sigma_derivatives(k: int, lam: Spectrum) -> np.ndarray:
    """d sigma_k / d lam_i = sigma_{k-1,i}(lam) for every i, shape (..., n)."""
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    out = np.empty(lam.shape, dtype=lam.dtype)
    for i in range(n):
        out[..., i] = _sigma_ext(k - 1, np.delete(lam, i, axis=-1))
    return out


def sigma_pair_minus(m: int, lam: Spectrum) -> np.ndarray:
    """sigma_{m,ij}(lam) for all i != j, shape (..., n, n), zero on the diagonal."""
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    out = np.zeros(lam.shape + (n,), dtype=lam.dtype)
    if is_exact(lam):
        out[...] = Fraction(0)
    for i, j in combinations(range(n), 2):
        value = _sigma_ext(m, np.delete(lam, [i, j], axis=-1))
        out[..., i, j] = value
        out[..., j, i] = value
    return out


# ---------- Cone membership ----------

def cone_class(lam: Spectrum, eps: float = CONE_EPS_CLASSIFY) -> Any:
    """
    Largest k with sigma_1..sigma_k all > eps * max(1, |lam|_inf)^j (0 if lam is not in Gamma_1).
    """
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    table = sigma_table(lam, n)
    scale = np.maximum(np.max(np.abs(lam), axis=-1), 1)
    positive = np.empty(lam.shape[:-1] + (n,), dtype=bool)
    for j in range(1, n + 1):
        threshold = eps * scale ** j if eps else 0
        positive[..., j - 1] = np.asarray(table[..., j] > threshold, dtype=bool)
    k_max = np.cumprod(positive, axis=-1).sum(axis=-1)
    if np.ndim(k_max) == 0:
        return int(k_max)
    return k_max.astype(int)


def in_cone(lam: Spectrum, k: int, eps: float = CONE_EPS_CLASSIFY) -> Any:
    return np.asarray(cone_class(lam, eps)) >= k


def require_cone(lam: Spectrum, k: int, eps: float = CONE_EPS_CLASSIFY, what: str = "spectrum") -> None:
    classes = np.atleast_1d(np.asarray(cone_class(lam, eps)))
    if np.all(classes >= k):
        return
    flat = np.asarray(lam).reshape(-1, np.asarray(lam).shape[-1])
    worst = int(np.argmin(classes.ravel()))
    raise ConeError(
        f"{what} not in Gamma_{k}",
        index=np.unravel_index(worst, classes.shape),
        eigenvalues=[float(v) for v in flat[worst]],
        cone_class=int(classes.ravel()[worst]),
    )


def _check_degree(k: int, n: int) -> None:
    if not 1 <= k <= n:
        raise DomainError(f"k={k} outside 1..{n}")


# ---------- Inequalities ----------

def garding_pairing(k: int, mu: Spectrum, lam: Spectrum) -> Any:
    """sum_i mu_i sigma_{k-1,i}(lam) for mu, lam in Gamma_k."""
    mu = _as_spectrum(mu)
    lam = _as_spectrum(lam)
    if mu.shape[-1] != lam.shape[-1]:
        raise DomainError("mu and lam must have the same length")
    _check_degree(k, lam.shape[-1])
    require_cone(mu, k, what="mu")
    require_cone(lam, k, what="lam")
    return _scalar(np.sum(mu * sigma_derivatives(k, lam), axis=-1))


def garding_ratio(k: int, mu: Spectrum, lam: Spectrum) -> Any:
    """Pairing divided by sigma_k(mu)^(1/k) sigma_k(lam)^((k-1)/k); bounded below by garding_constant(k)."""
    pairing = np.asarray(garding_pairing(k, mu, lam), dtype=float)
    s_mu = np.asarray(sigma_table(mu, k)[..., k], dtype=float)
    s_lam = np.asarray(sigma_table(lam, k)[..., k], dtype=float)
    return _scalar(pairing / (s_mu ** (1.0 / k) * s_lam ** ((k - 1.0) / k)))


def lemma22_coefficient(k: int, i: int, j: int, lam: Spectrum) -> Any:
    """
    sigma_{k-2,ij} - sigma_{k-1,i} sigma_{k-1,j} / sigma_k, non-positive on Gamma_k.

    Examples:
        lemma22_coefficient(2, 0, 1, [1, 1, 1]) -> -1/3
        lemma22_coefficient(1, 0, 1, lam) -> -1 / sigma_1(lam)
    """
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    _check_degree(k, n)
    if i == j:
        raise DomainError("lemma22_coefficient needs i != j")
    _check_drop((i, j), n)
    s_k = _sigma_ext(k, lam)
    if np.any(np.asarray(s_k <= 0, dtype=bool)):
        raise DomainError(f"sigma_{k} must be positive")
    s_i = _sigma_ext(k - 1, np.delete(lam, i, axis=-1))
    s_j = _sigma_ext(k - 1, np.delete(lam, j, axis=-1))
    s_ij = _sigma_ext(k - 2, np.delete(lam, [i, j], axis=-1))
    return _scalar(s_ij - s_i * s_j / s_k)


def lemma22_matrix(k: int, lam: Spectrum) -> np.ndarray:
    """Off-diagonal coefficients sigma_{k-2,ij} - sigma_{k-1,i} sigma_{k-1,j} / sigma_k, shape (..., n, n); zero diagonal."""
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    _check_degree(k, n)
    s_k = _sigma_ext(k, lam)
    if np.any(np.asarray(s_k <= 0, dtype=bool)):
        raise DomainError(f"sigma_{k} must be positive")
    d = sigma_derivatives(k, lam)
    coeff = sigma_pair_minus(k - 2, lam) - d[..., :, None] * d[..., None, :] / s_k[..., None, None]
    for i in range(n):
        coeff[..., i, i] = 0
    return coeff


def newton_check(k: int, i: int, j: int, lam: Spectrum, rtol: float = 1e-12) -> bool:
    """sigma_{k-2,ij} sigma_{k,ij} <= sigma_{k-1,ij}^2 (holds for every real vector)."""
    lam = _as_spectrum(lam)
    if i == j:
        raise DomainError("newton_check needs i != j")
    _check_drop((i, j), lam.shape[-1])
    rest = np.delete(lam, [i, j], axis=-1)
    lhs = _sigma_ext(k - 2, rest) * _sigma_ext(k, rest)
    rhs = _sigma_ext(k - 1, rest) ** 2
    if is_exact(lam):
        return bool(np.all(np.asarray(lhs <= rhs, dtype=bool)))
    scale = np.maximum(np.max(np.abs(rest), axis=-1, initial=0.0), 1.0) ** (2 * max(k - 1, 0))
    return bool(np.all(lhs <= rhs + rtol * scale))


def newton_margin(m: int, nu: Spectrum) -> Any:
    """Normalized Newton margin E_m^2 - E_{m-1} E_{m+1}, E_p = sigma_p / C(N, p); zero at equal entries."""
    nu = _as_spectrum(nu)
    big_n = nu.shape[-1]

    def normalized(p: int) -> Any:
        if p < 0 or p > big_n:
            return _sigma_ext(-1, nu)
        binom = int(comb(big_n, p, exact=True))
        value = _sigma_ext(p, nu)
        return value / (Fraction(binom) if is_exact(nu) else binom)

    return _scalar(normalized(m) ** 2 - normalized(m - 1) * normalized(m + 1))


def detG_lower_bound_ratio(k: int, lam: Spectrum) -> Any:
    """
    det(G) * sigma_k^(n/k) with det(G) = prod_i sigma_{k-1,i} / sigma_k^n.

    Equals 1 identically for k = n and (k/n)^n C(n,k)^(n/k) at lam = (1, ..., 1).
    """
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    _check_degree(k, n)
    require_cone(lam, k)
    d = np.asarray(sigma_derivatives(k, lam), dtype=float)
    s_k = np.asarray(_sigma_ext(k, lam), dtype=float)
    log_ratio = np.sum(np.log(d), axis=-1) + (n / k - n) * np.log(s_k)
    return _scalar(np.exp(log_ratio))


# ---------- Sampling and empirical constants ----------

def sample_cone(n: int, k: int, size: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Random spectra in Gamma_k: shifted Gaussians, rejection-filtered."""
    _check_degree(k, n)
    chunks = []
    have = 0
    while have < size:
        batch = max(2 * (size - have), 64)
        lam = rng.normal(size=(batch, n)) * scale
        lam += rng.uniform(0.0, 2.0 * scale, size=(batch, 1))
        keep = np.asarray(cone_class(lam)) >= k
        chunks.append(lam[keep])
        have += int(keep.sum())
    return np.concatenate(chunks)[:size]


def empirical_garding_constant(n: int, k: int, samples: int, rng: np.random.Generator) -> float:
    """Minimum of garding_ratio over random Gamma_k pairs."""
    mu = sample_cone(n, k, samples, rng)
    lam = sample_cone(n, k, samples, rng)
    ratios = np.asarray(garding_ratio(k, mu, lam), dtype=float)
    value = float(np.min(ratios))
    logger.info(f"🔍 Garding sweep n={n} k={k}: empirical constant {value:.6g} (implemented {garding_constant(k)})")
    return value


def empirical_detG_constant(n: int, k: int, samples: int, rng: np.random.Generator, chunk: int = 100_000) -> float:
    """Minimum of det(G) sigma_k^(n/k) over random Gamma_k spectra."""
    best = math.inf
    done = 0
    while done < samples:
        size = min(chunk, samples - done)
        lam = sample_cone(n, k, size, rng)
        best = min(best, float(np.min(detG_lower_bound_ratio(k, lam))))
        done += size
    logger.info(f"🔍 det G sweep n={n} k={k}: min ratio {best:.6g} over {samples} samples")
    return best


def balanced_detG_ratio(n: int, k: int) -> float:
    """det(G) sigma_k^(n/k) at lam = (1, ..., 1): (k/n)^n C(n,k)^(n/k), the minimizer over Gamma_k."""
    return float(detG_lower_bound_ratio(k, np.ones(n)))


def spectrum_summary(k: int, lam: Spectrum) -> Dict[str, Any]:
    """Everything the `sigma` debug command prints for one vector."""
    lam = _as_spectrum(lam)
    n = lam.shape[-1]
    if not 0 <= k <= n:
        raise DomainError(f"degree k={k} outside 0..{n}")
    table = sigma_table(lam, n)
    summary: Dict[str, Any] = {
        "lambda": [str(v) if is_exact(lam) else float(v) for v in lam],
        "sigma": [str(v) if is_exact(lam) else float(v) for v in table],
        "cone_class": cone_class(lam),
    }
    summary["sigma_k"] = str(table[k]) if is_exact(lam) else float(table[k])
    if 1 <= k <= n and summary["cone_class"] >= k:
        summary["garding_self_pairing"] = float(garding_pairing(k, lam, lam))
        summary["detG_ratio"] = float(detG_lower_bound_ratio(k, lam))
    return summary
