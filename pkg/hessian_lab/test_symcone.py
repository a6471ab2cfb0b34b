"""
Tests for the symmetric-function layer: sigma_k, cone membership and the cone inequalities
"""
from fractions import Fraction
from math import comb

import numpy as np
import pytest

from app.services.errors import ConeError, DomainError
from app.services.symcone import (
    cone_class,
    detG_lower_bound_ratio,
    empirical_garding_constant,
    garding_constant,
    garding_pairing,
    garding_ratio,
    in_cone,
    lemma22_coefficient,
    lemma22_matrix,
    newton_check,
    newton_margin,
    require_cone,
    sample_cone,
    sigma,
    sigma_derivatives,
    sigma_enumerate,
    sigma_minus,
    sigma_table,
    spectrum_summary,
    to_exact,
)

PAIRS = [(n, k) for n in range(1, 5) for k in range(1, n + 1)]


# ---------- sigma ----------

def test_sigma_examples():
    assert sigma(2, [1, 1, 1]) == pytest.approx(3.0)
    assert sigma(1, [3, -1]) == pytest.approx(2.0)
    assert sigma(0, [5, 7]) == pytest.approx(1.0)
    assert sigma(3, [1, 2, 3]) == pytest.approx(6.0)


def test_sigma_exact_mode():
    lam = [Fraction(1, 2), Fraction(1, 3), Fraction(1, 6)]
    assert sigma(2, lam) == Fraction(11, 36)
    assert isinstance(sigma(1, to_exact([0.5, 0.25])), Fraction)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 6])
def test_sigma_table_matches_enumeration(n):
    rng = np.random.default_rng(n)
    lam = rng.normal(size=n)
    table = sigma_table(lam, n)
    for k in range(n + 1):
        assert table[k] == pytest.approx(sigma_enumerate(k, lam), rel=1e-12, abs=1e-12)


def test_sigma_degree_out_of_range():
    with pytest.raises(DomainError):
        sigma(4, [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        sigma(-1, [1.0])


def test_sigma_minus_drops_entries():
    lam = [1.0, 2.0, 3.0, 4.0]
    assert sigma_minus(2, [0], lam) == pytest.approx(sigma(2, [2.0, 3.0, 4.0]))
    assert sigma_minus(1, [1, 3], lam) == pytest.approx(4.0)


def test_sigma_derivatives_are_partial_derivatives():
    lam = np.array([0.7, 1.3, 2.1])
    d = sigma_derivatives(2, lam)
    h = 1e-6
    for i in range(3):
        step = np.zeros(3)
        step[i] = h
        numeric = (sigma(2, lam + step) - sigma(2, lam - step)) / (2 * h)
        assert d[i] == pytest.approx(numeric, rel=1e-8)


# ---------- cone ----------

def test_cone_class_examples():
    assert cone_class([1.0, 1.0, 1.0]) == 3
    assert cone_class([1.0, 1.0, -0.5]) == 1
    assert cone_class([-1.0, -1.0]) == 0
    assert list(cone_class(np.array([[1.0, 1.0], [1.0, -2.0]]))) == [2, 0]


def test_require_cone_reports_worst_point():
    lam = np.array([[1.0, 1.0], [2.0, -1.0]])
    with pytest.raises(ConeError) as info:
        require_cone(lam, 2)
    assert info.value.cone_class == 1
    assert info.value.index == (1,)
    assert info.value.eigenvalues == [2.0, -1.0]


@pytest.mark.parametrize("n,k", PAIRS)
def test_sample_cone_lands_in_cone(n, k):
    lam = sample_cone(n, k, 500, np.random.default_rng(0))
    assert lam.shape == (500, n)
    assert np.all(in_cone(lam, k))


@pytest.mark.parametrize("n,k", PAIRS)
def test_sigma_derivatives_positive_on_cone(n, k):
    lam = sample_cone(n, k, 2000, np.random.default_rng(1))
    assert np.all(np.asarray(sigma_derivatives(k, lam), dtype=float) > 0)


# ---------- inequalities ----------

def test_garding_pairing_euler_identity():
    lam = [1.0, 2.0, 3.0]
    assert garding_pairing(2, lam, lam) == pytest.approx(22.0)
    assert garding_ratio(2, lam, lam) == pytest.approx(garding_constant(2))


@pytest.mark.parametrize("n,k", PAIRS)
def test_garding_inequality_holds(n, k):
    rng = np.random.default_rng(2)
    assert empirical_garding_constant(n, k, 3000, rng) >= garding_constant(k) * (1 - 1e-12)


def test_garding_rejects_points_outside_cone():
    with pytest.raises(ConeError):
        garding_pairing(2, [1.0, -3.0], [1.0, 1.0])


def test_lemma22_examples():
    assert lemma22_coefficient(2, 0, 1, to_exact([1, 1, 1])) == Fraction(-1, 3)
    lam = [0.5, 2.0, 1.5]
    assert lemma22_coefficient(1, 0, 2, lam) == pytest.approx(-1.0 / 4.0)


def test_lemma22_needs_distinct_indices():
    with pytest.raises(DomainError):
        lemma22_coefficient(2, 1, 1, [1.0, 1.0, 1.0])


@pytest.mark.parametrize("n,k", [(n, k) for n, k in PAIRS if n >= 2])
def test_lemma22_nonpositive_on_cone(n, k):
    lam = sample_cone(n, k, 2000, np.random.default_rng(3))
    coeff = np.asarray(lemma22_matrix(k, lam), dtype=float)
    assert np.max(coeff) <= 1e-12
    i, j = 0, n - 1
    np.testing.assert_allclose(coeff[:, i, j], np.asarray(lemma22_coefficient(k, i, j, lam), dtype=float), rtol=1e-10)


def test_newton_check_on_arbitrary_vectors():
    rng = np.random.default_rng(4)
    lam = rng.normal(size=(5000, 5)) * 3.0
    for k in range(1, 6):
        assert newton_check(k, 0, 1, lam)
        assert newton_check(k, 2, 4, lam)


def test_newton_margin_zero_at_equal_entries():
    nu = to_exact([Fraction(3, 2)] * 4)
    for m in range(1, 4):
        assert newton_margin(m, nu) == 0
    assert newton_margin(2, [1.0, 2.0, 5.0, -1.0]) >= 0


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_detG_ratio_is_one_at_top_degree(n):
    lam = sample_cone(n, n, 1000, np.random.default_rng(5))
    np.testing.assert_allclose(detG_lower_bound_ratio(n, lam), 1.0, rtol=1e-12)


@pytest.mark.parametrize("n,k", PAIRS)
def test_detG_ratio_at_identity(n, k):
    expected = (k / n) ** n * comb(n, k) ** (n / k)
    assert detG_lower_bound_ratio(k, np.ones(n)) == pytest.approx(expected, rel=1e-12)


def test_spectrum_summary_fields():
    summary = spectrum_summary(2, [1.0, 2.0, 3.0])
    assert summary["cone_class"] == 3
    assert summary["sigma_k"] == pytest.approx(11.0)
    assert summary["garding_self_pairing"] == pytest.approx(22.0)
    exact = spectrum_summary(1, [Fraction(1, 2), Fraction(-1, 4)])
    assert exact["sigma_k"] == "1/4"
