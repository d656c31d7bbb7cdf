"""Residue-number-system polynomial arithmetic over power-of-two cyclotomics.

A polynomial in Z_Q[X]/(X^N + 1) is held as an L' x N uint64 matrix: one row
of residues per prime in the modulus chain. Rows never interact except in
base conversion, so every transform below works row by row.

Multiplications happen in the Evaluation domain reached through a negacyclic
NTT (2N-th root of unity folded into the twiddles); the matching inverse
returns bit-exactly to the Coefficient domain.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
import sympy

from . import kernels
from .errors import BasisError, DomainError, ParameterError

_MASK64 = (1 << 64) - 1


class Domain(Enum):
    COEFF = "coeff"
    EVAL = "eval"


@dataclass(frozen=True)
class Modulus:
    """An NTT-friendly prime below 2^62 with precomputed reduction constants.

    barrett_mu = floor(2^128 / q) reduces scalar products; ninv and r2 are
    the Montgomery constants (-q^-1 mod 2^64 and 2^128 mod q) the vector
    kernels use.
    """

    q: int
    ninv: int
    r2: int
    barrett_mu: int

    @classmethod
    def make(cls, q: int) -> "Modulus":
        if not (2 < q < (1 << 62)):
            raise ParameterError(f"modulus {q} outside (2, 2^62)")
        ninv = (-pow(q, -1, 1 << 64)) & _MASK64
        r2 = (1 << 128) % q
        mu = (1 << 128) // q
        return cls(q=q, ninv=ninv, r2=r2, barrett_mu=mu)

    def mul(self, a: int, b: int) -> int:
        """Barrett modular product of two residues using barrett_mu."""
        assert 0 <= a < self.q and 0 <= b < self.q
        t = a * b
        r = t - ((t * self.barrett_mu) >> 128) * self.q
        if r >= self.q:
            r -= self.q
        return r

    def to_mont(self, a: int) -> int:
        """Montgomery form a * 2^64 mod q (scalar, for table building)."""
        return (a << 64) % self.q

    def pow(self, a: int, e: int) -> int:
        return pow(a, e, self.q)

    def inv(self, a: int) -> int:
        return pow(a, -1, self.q)


def mod_mul(a: int, b: int, mod: Modulus) -> int:
    """64-bit modular multiply via the modulus's precomputed constants."""
    return mod.mul(a, b)


# ---------------------------------------------------------------------------
# prime chain construction
# ---------------------------------------------------------------------------

def find_ntt_primes(n: int, bits: int, count: int, avoid: Iterable[int] = (),
                    alternate: bool = False) -> list[int]:
    """Primes q = 1 mod 2N near 2^bits.

    With alternate=True the primes straddle 2^bits (closest below, closest
    above, next below, ...) so that cumulative products track powers of
    2^bits; this keeps the rescaling scale drift bounded.
    """
    step = 2 * n
    base = 1 << bits
    start = base - ((base - 1) % step)  # largest value = 1 mod 2N, <= base
    taken = set(avoid)
    found: list[int] = []

    below = start
    above = start + step

    def next_below():
        nonlocal below
        while True:
            below -= step
            if below.bit_length() < bits - 1:
                raise ParameterError(f"ran out of {bits}-bit primes below 2^{bits}")
            if below not in taken and sympy.isprime(below):
                return below

    def next_above():
        nonlocal above
        while True:
            above += step
            if above.bit_length() > bits + 1:
                raise ParameterError(f"ran out of {bits}-bit primes above 2^{bits}")
            if above not in taken and sympy.isprime(above):
                return above

    for i in range(count):
        if alternate and i % 2 == 1:
            p = next_above()
        else:
            p = next_below()
        taken.add(p)
        found.append(p)
    return found


# ---------------------------------------------------------------------------
# twiddle tables
# ---------------------------------------------------------------------------

def _bit_reverse(x: int, bits: int) -> int:
    r = 0
    for _ in range(bits):
        r = (r << 1) | (x & 1)
        x >>= 1
    return r


@dataclass(frozen=True)
class TwiddleTable:
    """Bit-reversed powers of a primitive 2N-th root, in Montgomery form.

    forward[j] = mont(psi^brv(j)), inverse[j] = mont(psi^-brv(j)); the
    Cooley-Tukey forward pass and Gentleman-Sande inverse pass index them
    as table[m + i] per butterfly block.
    """

    n: int
    psi: int
    forward: np.ndarray
    inverse: np.ndarray
    n_inv_mont: int


_twiddle_cache: dict[tuple[int, int], TwiddleTable] = {}


def _find_psi(q: int, n: int) -> int:
    if (q - 1) % (2 * n) != 0:
        raise ParameterError(f"{q} is not 1 mod 2N for N={n}")
    for r in range(2, 1000):
        psi = pow(r, (q - 1) // (2 * n), q)
        if psi != 1 and pow(psi, n, q) == q - 1:
            return psi
    raise ParameterError(f"no primitive 2N-th root found for q={q}")


def get_twiddles(mod: Modulus, n: int) -> TwiddleTable:
    key = (mod.q, n)
    tab = _twiddle_cache.get(key)
    if tab is not None:
        return tab
    q = mod.q
    psi = _find_psi(q, n)
    psi_inv = pow(psi, -1, q)
    bits = n.bit_length() - 1
    fwd = np.empty(n, dtype=np.uint64)
    inv = np.empty(n, dtype=np.uint64)
    fp = 1
    ip = 1
    powers_f = [0] * n
    powers_i = [0] * n
    for j in range(n):
        powers_f[j] = fp
        powers_i[j] = ip
        fp = (fp * psi) % q
        ip = (ip * psi_inv) % q
    for j in range(n):
        b = _bit_reverse(j, bits)
        fwd[j] = mod.to_mont(powers_f[b])
        inv[j] = mod.to_mont(powers_i[b])
    tab = TwiddleTable(n=n, psi=psi, forward=fwd, inverse=inv,
                       n_inv_mont=mod.to_mont(pow(n, -1, q)))
    _twiddle_cache[key] = tab
    return tab


# ---------------------------------------------------------------------------
# RnsPoly
# ---------------------------------------------------------------------------

@dataclass
class RnsPoly:
    """Residue matrix [len(mods), n] plus the domain flag.

    Instances are treated as immutable; operations allocate fresh storage.
    """

    mods: tuple[Modulus, ...]
    coeffs: np.ndarray
    domain: Domain

    def __post_init__(self):
        if self.coeffs.dtype != np.uint64:
            raise ParameterError("residues must be uint64")
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != len(self.mods):
            raise BasisError("residue matrix shape disagrees with basis")
        if len(self.mods) == 0:
            raise BasisError("empty basis")

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @property
    def nlimbs(self) -> int:
        return len(self.mods)

    def qs(self) -> tuple[int, ...]:
        return tuple(m.q for m in self.mods)

    def copy(self) -> "RnsPoly":
        return RnsPoly(self.mods, self.coeffs.copy(), self.domain)

    def limbs(self, idx: slice) -> "RnsPoly":
        """Sub-basis view (copied) over a contiguous row range."""
        return RnsPoly(self.mods[idx], self.coeffs[idx].copy(), self.domain)


def zero_poly(mods: Sequence[Modulus], n: int, domain: Domain = Domain.COEFF) -> RnsPoly:
    return RnsPoly(tuple(mods), np.zeros((len(mods), n), dtype=np.uint64), domain)


def from_int_coeffs(values: Sequence[int], mods: Sequence[Modulus], n: int) -> RnsPoly:
    """Reduce signed integer coefficients into every limb (coefficient domain)."""
    if len(values) > n:
        raise ParameterError("too many coefficients")
    out = np.zeros((len(mods), n), dtype=np.uint64)
    vals = list(values) + [0] * (n - len(values))
    for i, m in enumerate(mods):
        out[i] = np.array([v % m.q for v in vals], dtype=np.uint64)
    return RnsPoly(tuple(mods), out, Domain.COEFF)


def _check_same(a: RnsPoly, b: RnsPoly):
    if a.qs() != b.qs():
        raise BasisError("operand bases differ")
    if a.domain != b.domain:
        raise DomainError("operand domains differ")


def poly_add(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _check_same(a, b)
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.mods):
        out[i] = kernels.addmod(a.coeffs[i], b.coeffs[i], m.q)
    return RnsPoly(a.mods, out, a.domain)


def poly_sub(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    _check_same(a, b)
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.mods):
        out[i] = kernels.submod(a.coeffs[i], b.coeffs[i], m.q)
    return RnsPoly(a.mods, out, a.domain)


def poly_neg(a: RnsPoly) -> RnsPoly:
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.mods):
        out[i] = kernels.negmod(a.coeffs[i], m.q)
    return RnsPoly(a.mods, out, a.domain)


def poly_mul_pointwise(a: RnsPoly, b: RnsPoly) -> RnsPoly:
    """Hadamard product in the Evaluation domain (ordinary-domain inputs)."""
    _check_same(a, b)
    if a.domain is not Domain.EVAL:
        raise DomainError("pointwise product requires Evaluation domain")
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.mods):
        bm = kernels.mulmod_mont(b.coeffs[i], np.uint64(m.r2), m.q, m.ninv)
        out[i] = kernels.mulmod_mont(a.coeffs[i], bm, m.q, m.ninv)
    return RnsPoly(a.mods, out, a.domain)


def to_mont_rows(p: RnsPoly) -> np.ndarray:
    """Residues lifted to Montgomery form, for precomputed operands."""
    out = np.empty_like(p.coeffs)
    for i, m in enumerate(p.mods):
        out[i] = kernels.mulmod_mont(p.coeffs[i], np.uint64(m.r2), m.q, m.ninv)
    return out


def poly_mul_mont_rows(a: RnsPoly, rows_mont: np.ndarray) -> RnsPoly:
    """Product with a precomputed Montgomery-form residue matrix."""
    if a.domain is not Domain.EVAL:
        raise DomainError("pointwise product requires Evaluation domain")
    out = np.empty_like(a.coeffs)
    for i, m in enumerate(a.mods):
        out[i] = kernels.mulmod_mont(a.coeffs[i], rows_mont[i], m.q, m.ninv)
    return RnsPoly(a.mods, out, a.domain)


def ntt_forward(p: RnsPoly) -> RnsPoly:
    """Coefficient -> Evaluation, negacyclic, in bit-reversed point order."""
    if p.domain is not Domain.COEFF:
        raise DomainError("ntt_forward expects Coefficient domain")
    out = p.coeffs.copy()
    for i, m in enumerate(p.mods):
        tab = get_twiddles(m, p.n)
        kernels.ntt_inplace(out[i], tab.forward, m.q, m.ninv)
    return RnsPoly(p.mods, out, Domain.EVAL)


def ntt_inverse(p: RnsPoly) -> RnsPoly:
    """Evaluation -> Coefficient; exact inverse of ntt_forward."""
    if p.domain is not Domain.EVAL:
        raise DomainError("ntt_inverse expects Evaluation domain")
    out = p.coeffs.copy()
    for i, m in enumerate(p.mods):
        tab = get_twiddles(m, p.n)
        kernels.intt_inplace(out[i], tab.inverse, m.q, m.ninv, tab.n_inv_mont)
    return RnsPoly(p.mods, out, Domain.COEFF)


# ---------------------------------------------------------------------------
# fast base conversion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _ConvTable:
    inv_punc_mont: np.ndarray      # [Ls] (Q/q_i)^-1 mod q_i, Montgomery
    halves: np.ndarray             # [Ls] floor(q_i / 2)
    src_qs: np.ndarray             # [Ls]
    tmat_mont: np.ndarray          # [Lt, Ls] (Q/q_i) mod t_j, Montgomery


_conv_cache: dict[tuple[tuple[int, ...], tuple[int, ...]], _ConvTable] = {}


def _conv_table(src: tuple[Modulus, ...], dst: tuple[Modulus, ...]) -> _ConvTable:
    key = (tuple(m.q for m in src), tuple(m.q for m in dst))
    tab = _conv_cache.get(key)
    if tab is not None:
        return tab
    big_q = 1
    for m in src:
        big_q *= m.q
    punc = [big_q // m.q for m in src]
    inv_punc = np.array(
        [m.to_mont(pow(punc[i] % m.q, -1, m.q)) for i, m in enumerate(src)],
        dtype=np.uint64,
    )
    halves = np.array([m.q // 2 for m in src], dtype=np.uint64)
    src_qs = np.array([m.q for m in src], dtype=np.uint64)
    tmat = np.empty((len(dst), len(src)), dtype=np.uint64)
    for j, t in enumerate(dst):
        for i in range(len(src)):
            tmat[j, i] = t.to_mont(punc[i] % t.q)
    tab = _ConvTable(inv_punc_mont=inv_punc, halves=halves, src_qs=src_qs, tmat_mont=tmat)
    _conv_cache[key] = tab
    return tab


def base_convert(p: RnsPoly, new_mods: Sequence[Modulus]) -> RnsPoly:
    """Approximate (integer-only) base conversion of the centred value.

    The result's residues represent value + e * Q_src with |e| at most
    ceil(Ls/2) where Ls is the source limb count; exact whenever the centred
    value is small against Q_src. Requires the Coefficient domain.
    """
    if p.domain is not Domain.COEFF:
        raise DomainError("base_convert expects Coefficient domain")
    dst = tuple(new_mods)
    if len(dst) == 0:
        raise BasisError("empty target basis")
    tab = _conv_table(p.mods, dst)
    n = p.n
    ys = np.empty_like(p.coeffs)
    for i, m in enumerate(p.mods):
        ys[i] = kernels.mulmod_mont(p.coeffs[i], tab.inv_punc_mont[i], m.q, m.ninv)
    out = np.zeros((len(dst), n), dtype=np.uint64)
    for j, t in enumerate(dst):
        kernels.fbc_row(out[j], ys, tab.src_qs, tab.halves, tab.tmat_mont[j], t.q, t.ninv)
    return RnsPoly(dst, out, Domain.COEFF)


# ---------------------------------------------------------------------------
# automorphisms (rotation support)
# ---------------------------------------------------------------------------

_auto_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _auto_maps(n: int, g: int) -> tuple[np.ndarray, np.ndarray]:
    key = (n, g % (2 * n))
    maps = _auto_cache.get(key)
    if maps is not None:
        return maps
    perm = np.empty(n, dtype=np.int64)
    flip = np.empty(n, dtype=bool)
    for i in range(n):
        j = (i * g) % (2 * n)
        if j < n:
            perm[i] = j
            flip[i] = False
        else:
            perm[i] = j - n
            flip[i] = True
    _auto_cache[key] = (perm, flip)
    return perm, flip


def automorphism(p: RnsPoly, g: int) -> RnsPoly:
    """Substitute X -> X^g (g odd) in the Coefficient domain."""
    if p.domain is not Domain.COEFF:
        raise DomainError("automorphism expects Coefficient domain")
    if g % 2 == 0:
        raise ParameterError("automorphism exponent must be odd")
    perm, flip = _auto_maps(p.n, g)
    out = np.empty_like(p.coeffs)
    for i, m in enumerate(p.mods):
        row = p.coeffs[i]
        vals = np.where(flip, kernels.negmod(row, m.q), row)
        out[i, perm] = vals
    return RnsPoly(p.mods, out, Domain.COEFF)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_poly(mods: Sequence[Modulus], n: int, dist: str,
                rng: np.random.Generator, sigma: float = 3.2) -> RnsPoly:
    """Random ring element in the Coefficient domain.

    uniform: independent full-range residues per limb. ternary / gaussian:
    one small signed integer per coefficient, replicated across limbs.
    """
    mods = tuple(mods)
    if dist == "uniform":
        out = np.empty((len(mods), n), dtype=np.uint64)
        for i, m in enumerate(mods):
            out[i] = rng.integers(0, m.q, size=n, dtype=np.uint64)
        return RnsPoly(mods, out, Domain.COEFF)
    if dist == "ternary":
        small = rng.integers(-1, 2, size=n, dtype=np.int64)
    elif dist == "gaussian":
        small = np.rint(rng.normal(0.0, sigma, size=n)).astype(np.int64)
    else:
        raise ParameterError(f"unknown distribution {dist!r}")
    out = np.empty((len(mods), n), dtype=np.uint64)
    for i, m in enumerate(mods):
        out[i] = np.where(small >= 0, small, small + m.q).astype(np.uint64)
    return RnsPoly(mods, out, Domain.COEFF)


# ---------------------------------------------------------------------------
# CRT reconstruction (decode / test support)
# ---------------------------------------------------------------------------

def crt_consts(mods: Sequence[Modulus]) -> tuple[int, list[int]]:
    big_q = 1
    for m in mods:
        big_q *= m.q
    consts = []
    for m in mods:
        punc = big_q // m.q
        consts.append(punc * pow(punc % m.q, -1, m.q))
    return big_q, consts


def to_int_coeffs(p: RnsPoly, bound_bits: int | None = None) -> list[int]:
    """Centred integer coefficients via CRT over a limb prefix.

    bound_bits, when given, is an upper bound on log2 of the coefficient
    magnitude; only enough limbs to cover it (plus margin) are combined,
    which keeps decode cheap at high levels.
    """
    if p.domain is not Domain.COEFF:
        raise DomainError("reconstruction expects Coefficient domain")
    use = len(p.mods)
    if bound_bits is not None:
        acc = 0
        for i, m in enumerate(p.mods):
            acc += m.q.bit_length() - 1
            if acc > bound_bits + 2:
                use = i + 1
                break
    mods = p.mods[:use]
    big_q, consts = crt_consts(mods)
    half = big_q // 2
    rows = [p.coeffs[i].tolist() for i in range(use)]
    n = p.n
    out = [0] * n
    for i in range(use):
        c = consts[i]
        row = rows[i]
        for k in range(n):
            out[k] += row[k] * c
    for k in range(n):
        v = out[k] % big_q
        if v > half:
            v -= big_q
        out[k] = v
    return out
