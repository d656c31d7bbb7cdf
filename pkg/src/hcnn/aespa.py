"""Quadratic activation from a normalized Hermite expansion of ReLU.

The training-time form is gamma * sum_i f_i * (hbar_i(x) - mu_i) /
sqrt(sigma2_i + eps) + beta over the orthonormal probabilists' Hermite
basis hbar_i = He_i / sqrt(i!). At inference (d = 2) the sum collapses to
a per-channel quadratic a*x^2 + b*x + c; the homomorphic evaluation runs
x * (x + b/a) in one multiplication level and leaves a and the constant
term to be absorbed by the neighbouring convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import hermite_e
from scipy.integrate import quad

from .errors import ParameterError

MAX_DEGREE = 8

# below this curvature a channel is effectively affine; the fold clips a to
# +-LINEAR_EPS so the shared x*(x + b/a) route stays finite, costing at most
# LINEAR_EPS * x^2 of absolute error
LINEAR_EPS = 1e-8

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def hbar(i: int, x):
    """Orthonormal probabilists' Hermite polynomial He_i(x)/sqrt(i!)."""
    coef = [0.0] * i + [1.0]
    return hermite_e.hermeval(x, coef) / math.sqrt(math.factorial(i))


@dataclass(frozen=True)
class HermiteBasis:
    """Expansion coefficients f_i = E[ReLU(X) * hbar_i(X)], X ~ N(0,1)."""

    d: int
    f_hat: tuple[float, ...]

    def __post_init__(self):
        if len(self.f_hat) != self.d + 1:
            raise ParameterError("coefficient count must be d + 1")


def hermite_coeffs(d: int) -> HermiteBasis:
    """Expand ReLU over the first d+1 orthonormal Hermite polynomials.

    Each coefficient is the half-line integral of x * hbar_i(x) * phi(x),
    which is smooth, so adaptive quadrature resolves it to near machine
    precision. Deterministic for a given scipy version.
    """
    if not 0 <= d <= MAX_DEGREE:
        raise ParameterError(f"degree {d} outside [0, {MAX_DEGREE}]")
    coeffs = []
    for i in range(d + 1):
        val, _ = quad(
            lambda x: x * hbar(i, x) * math.exp(-0.5 * x * x) / _SQRT_2PI,
            0.0,
            np.inf,
            epsabs=1e-14,
            epsrel=1e-14,
        )
        coeffs.append(val)
    return HermiteBasis(d=d, f_hat=tuple(coeffs))


@dataclass(frozen=True)
class AespaChannelParams:
    """Per-channel learnables and per-basis normalization statistics."""

    gamma: float
    beta: float
    mu: tuple[float, ...]
    sigma2: tuple[float, ...]
    eps: float = 1e-5

    def __post_init__(self):
        if len(self.mu) != len(self.sigma2):
            raise ParameterError("mu and sigma2 must have equal length")
        for s2 in self.sigma2:
            if s2 + self.eps <= 0:
                raise ParameterError("sigma2 + eps must be positive")

    @property
    def d(self) -> int:
        return len(self.mu) - 1

    @classmethod
    def identity(cls, d: int = 2) -> "AespaChannelParams":
        return cls(gamma=1.0, beta=0.0, mu=(0.0,) * (d + 1),
                   sigma2=(1.0,) * (d + 1), eps=0.0)


def aespa_eval_plain(x, ch: AespaChannelParams, basis: HermiteBasis):
    """Training-form reference: the normalized expansion, term by term."""
    if ch.d != basis.d:
        raise ParameterError(f"degree mismatch: channel {ch.d}, basis {basis.d}")
    x = np.asarray(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for i, f in enumerate(basis.f_hat):
        acc = acc + f * (hbar(i, x) - ch.mu[i]) / math.sqrt(ch.sigma2[i] + ch.eps)
    return ch.gamma * acc + ch.beta


@dataclass(frozen=True)
class QuadActivation:
    """y = a*x^2 + b*x + c with the absorption plan for the neighbours.

    fold_note records which scalars the adjacent convolution must apply:
    a becomes its per-channel input pre-scale and c joins its bias path,
    so the homomorphic activation itself only computes x * (x + b/a).
    """

    a: float
    b: float
    c: float
    fold_note: str = field(default="", compare=False)

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.a * x * x + self.b * x + self.c

    @property
    def mask_value(self) -> float:
        """The additive plaintext b/a used inside x * (x + b/a)."""
        return self.b / self.a


def fold_quadratic(ch: AespaChannelParams, basis: HermiteBasis) -> QuadActivation:
    """Collapse the d=2 normalized expansion into quadratic coefficients."""
    if basis.d != 2 or ch.d != 2:
        raise ParameterError(f"fold needs degree 2, got {basis.d}/{ch.d}")
    f0, f1, f2 = basis.f_hat
    s0, s1, s2 = (1.0 / math.sqrt(v + ch.eps) for v in ch.sigma2)
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    a = ch.gamma * f2 * s2 * inv_sqrt2
    b = ch.gamma * f1 * s1
    c = (
        ch.gamma * (
            f0 * s0 * (1.0 - ch.mu[0])
            - f1 * s1 * ch.mu[1]
            - f2 * s2 * (inv_sqrt2 + ch.mu[2])
        )
        + ch.beta
    )
    note = "a -> next-conv pre_scale; c -> next-conv bias"
    if abs(a) < LINEAR_EPS:
        a = math.copysign(LINEAR_EPS, a if a != 0.0 else 1.0)
        note += f"; near-linear channel, a clipped to {a:+.1e}"
    return QuadActivation(a=a, b=b, c=c, fold_note=note)


def fold_channels(channels, basis: HermiteBasis) -> list[QuadActivation]:
    return [fold_quadratic(ch, basis) for ch in channels]
