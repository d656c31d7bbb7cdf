"""Hermite coefficients and the quadratic fold, against two independent
quadrature oracles (high-precision mpmath and exact-by-parity Gauss rules)."""

import math

import mpmath
import numpy as np
import pytest
from scipy.special import roots_hermitenorm, roots_laguerre

from hcnn.aespa import (
    AespaChannelParams,
    HermiteBasis,
    LINEAR_EPS,
    QuadActivation,
    aespa_eval_plain,
    fold_quadratic,
    hbar,
    hermite_coeffs,
)
from hcnn.errors import ParameterError

# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def oracle_mpmath(i: int) -> float:
    """E[ReLU(X) hbar_i(X)] at 40 decimal digits."""
    mpmath.mp.dps = 40

    def integrand(x):
        he = mpmath.mpf(2) ** (mpmath.mpf(-i) / 2) * mpmath.hermite(i, x / mpmath.sqrt(2))
        return (
            x * he / mpmath.sqrt(mpmath.factorial(i))
            * mpmath.exp(-(x ** 2) / 2) / mpmath.sqrt(2 * mpmath.pi)
        )

    return float(mpmath.quad(integrand, [0, mpmath.inf]))


def oracle_gauss_hermite(i: int, nodes: int = 200) -> float:
    """Gauss-rule oracle, exact by parity split.

    ReLU = (x + |x|)/2. The x-part integrand is a polynomial, so the plain
    probabilists' Gauss-Hermite rule is exact; the |x|-part uses the
    generalized Gauss-Hermite rule for weight |x| e^{-x^2/2}, whose nodes
    +-sqrt(2 t_k) come from the Gauss-Laguerre rule. Both pieces are exact
    for every polynomial hbar_i up to well beyond degree 8.
    """
    x, w = roots_hermitenorm(nodes)
    odd_part = float((w * x * hbar(i, x)).sum()) / math.sqrt(2 * math.pi) / 2
    t, wl = roots_laguerre(nodes)
    xk = np.sqrt(2 * t)
    even_part = float((wl * (hbar(i, xk) + hbar(i, -xk))).sum()) / math.sqrt(2 * math.pi) / 2
    return odd_part + even_part


# frozen from oracle_mpmath (cross-checked against oracle_gauss_hermite)
F0_GOLDEN = 0.3989422804014327   # 1/sqrt(2*pi)
F2_GOLDEN = 0.2820947917738781   # 1/(2*sqrt(pi))
# max |quadratic - ReLU| on [-3,3] under identity normalization, attained
# at the interval ends: 10*f2/sqrt(2) - 3/2 = 5/sqrt(2*pi) - 3/2
TRUNCATION_GOLDEN = 0.4947114020071635


class TestHermiteCoeffs:
    def test_f1_exact_half(self):
        basis = hermite_coeffs(2)
        assert abs(basis.f_hat[1] - 0.5) < 1e-12

    def test_f3_vanishes(self):
        basis = hermite_coeffs(4)
        assert abs(basis.f_hat[3]) < 1e-12

    def test_f0_f2_goldens(self):
        basis = hermite_coeffs(2)
        assert abs(basis.f_hat[0] - F0_GOLDEN) < 1e-10
        assert abs(basis.f_hat[2] - F2_GOLDEN) < 1e-10

    @pytest.mark.parametrize("i", range(9))
    def test_matches_both_oracles(self, i):
        got = hermite_coeffs(8).f_hat[i]
        assert abs(got - oracle_mpmath(i)) < 1e-10
        assert abs(got - oracle_gauss_hermite(i)) < 1e-10

    def test_oracles_agree_with_each_other(self):
        for i in range(9):
            assert abs(oracle_mpmath(i) - oracle_gauss_hermite(i)) < 1e-13

    def test_odd_coeffs_vanish(self):
        basis = hermite_coeffs(8)
        for i in (3, 5, 7):
            assert abs(basis.f_hat[i]) < 1e-12

    def test_degree_range(self):
        with pytest.raises(ParameterError):
            hermite_coeffs(9)
        with pytest.raises(ParameterError):
            hermite_coeffs(-1)
        assert hermite_coeffs(0).f_hat == (hermite_coeffs(2).f_hat[0],)


class TestEvalPlain:
    def test_identity_at_zero(self):
        basis = hermite_coeffs(2)
        ch = AespaChannelParams.identity()
        got = aespa_eval_plain(0.0, ch, basis)
        want = basis.f_hat[0] - basis.f_hat[2] / math.sqrt(2)
        assert abs(got - want) < 1e-12
        assert abs(want - 0.19947) < 1e-5

    def test_gamma_zero_gives_beta(self):
        basis = hermite_coeffs(2)
        ch = AespaChannelParams(gamma=0.0, beta=1.25, mu=(0.3, 0.1, -0.2),
                                sigma2=(1.0, 2.0, 0.5))
        xs = np.linspace(-6, 6, 41)
        assert np.allclose(aespa_eval_plain(xs, ch, basis), 1.25, atol=1e-12)

    def test_degree_mismatch(self):
        with pytest.raises(ParameterError):
            aespa_eval_plain(0.0, AespaChannelParams.identity(2), hermite_coeffs(4))

    def test_sigma_validation(self):
        with pytest.raises(ParameterError):
            AespaChannelParams(gamma=1, beta=0, mu=(0, 0, 0),
                               sigma2=(1.0, -2.0, 1.0), eps=1e-5)


def random_channel(rng) -> AespaChannelParams:
    return AespaChannelParams(
        gamma=float(rng.uniform(-2, 2)),
        beta=float(rng.uniform(-1, 1)),
        mu=tuple(rng.uniform(-1, 1, size=3)),
        sigma2=tuple(rng.uniform(0.1, 4.0, size=3)),
        eps=1e-5,
    )


class TestFold:
    def test_identity_normalization(self):
        basis = hermite_coeffs(2)
        q = fold_quadratic(AespaChannelParams.identity(), basis)
        assert abs(q.a - 0.19947) < 1e-5
        assert abs(q.b - 0.5) < 1e-12
        assert abs(q.c - 0.19947) < 1e-5
        assert "pre_scale" in q.fold_note

    def test_gamma_linearity(self):
        basis = hermite_coeffs(2)
        ch1 = AespaChannelParams(gamma=1.0, beta=0.4, mu=(0.1, 0.2, 0.3),
                                 sigma2=(1.0, 1.5, 2.0))
        ch2 = AespaChannelParams(gamma=2.0, beta=0.4, mu=(0.1, 0.2, 0.3),
                                 sigma2=(1.0, 1.5, 2.0))
        q1, q2 = fold_quadratic(ch1, basis), fold_quadratic(ch2, basis)
        assert abs(q2.a - 2 * q1.a) < 1e-12
        assert abs(q2.b - 2 * q1.b) < 1e-12
        assert abs((q2.c - ch2.beta) - 2 * (q1.c - ch1.beta)) < 1e-12

    def test_matches_eval_plain_on_grid(self, rng):
        basis = hermite_coeffs(2)
        xs = np.linspace(-6, 6, 1000)
        for _ in range(100):
            ch = random_channel(rng)
            q = fold_quadratic(ch, basis)
            want = aespa_eval_plain(xs, ch, basis)
            got = q(xs)
            assert np.max(np.abs(got - want)) < 1e-9

    def test_degree_guard(self):
        with pytest.raises(ParameterError):
            fold_quadratic(AespaChannelParams.identity(4), hermite_coeffs(4))

    def test_near_linear_clip(self):
        basis = HermiteBasis(2, (0.4, 0.5, 0.0))  # curvature exactly zero
        q = fold_quadratic(AespaChannelParams.identity(), basis)
        assert abs(q.a) == LINEAR_EPS
        assert "clipped" in q.fold_note
        assert np.isfinite(q.mask_value)

    def test_truncation_golden(self):
        basis = hermite_coeffs(2)
        q = fold_quadratic(AespaChannelParams.identity(), basis)
        xs = np.linspace(-3, 3, 200001)
        gap = float(np.max(np.abs(q(xs) - np.maximum(xs, 0.0))))
        assert abs(gap - TRUNCATION_GOLDEN) < 1e-6
