"""Leveled CKKS over an RNS modulus chain.

Ciphertexts are pairs of Evaluation-domain RnsPoly at some level l (limbs
q_0..q_l) carrying a floating-point scale. Multiplications are followed by
an explicit rescale which divides the encrypted value by the dropped prime
and shortens the basis by one limb.

Key switching is the hybrid RNS variant: the switched polynomial is split
into digits of alpha consecutive limbs (alpha = number of special primes),
each digit is raised to the extended basis with a fast base conversion,
multiplied against per-digit keys that carry a P * lambda_j * s' payload,
and the sum is brought back down by dividing out the special primes.
"""

from __future__ import annotations

import hashlib
import os
import sys
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import (
    KeyError_,
    LevelError,
    ParameterError,
    RefreshError,
    ScaleError,
)
from .ring import (
    Domain,
    Modulus,
    RnsPoly,
    automorphism,
    base_convert,
    find_ntt_primes,
    from_int_coeffs,
    ntt_forward,
    ntt_inverse,
    poly_add,
    poly_mul_pointwise,
    poly_neg,
    poly_sub,
    sample_poly,
    to_int_coeffs,
    to_mont_rows,
    zero_poly,
)

TEST_MODE_ENV = "HCNN_TEST_MODE"


def test_mode_enabled() -> bool:
    return os.environ.get(TEST_MODE_ENV, "") == "1"


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CkksParams:
    """Modulus chain, ring degree and scale for one instantiation.

    toy=True marks desk-scale parameter sets with no security claim; every
    report emitted under such parameters carries an insecure flag.
    """

    name: str
    n: int
    q_mods: tuple[Modulus, ...]
    p_mods: tuple[Modulus, ...]
    delta: float
    toy: bool = True

    def __post_init__(self):
        n = self.n
        if n < 8 or n & (n - 1):
            raise ParameterError("ring degree must be a power of two >= 8")
        qs = [m.q for m in self.q_mods]
        ps = [m.q for m in self.p_mods]
        if len(set(qs + ps)) != len(qs) + len(ps):
            raise ParameterError("moduli must be pairwise distinct")
        for q in qs + ps:
            if q % (2 * n) != 1:
                raise ParameterError(f"modulus {q} is not 1 mod 2N")
            if q >= 1 << 62:
                raise ParameterError("moduli must stay below 2^62")
        if not self.p_mods:
            raise ParameterError("at least one special prime required")
        # key-switch digits must fit under the special product
        p_prod = 1
        for p in ps:
            p_prod *= p
        alpha = len(ps)
        for j in range(0, len(qs), alpha):
            d_prod = 1
            for q in qs[j : j + alpha]:
                d_prod *= q
            if d_prod > p_prod:
                raise ParameterError(
                    "special-prime product smaller than a key-switch digit"
                )

    @property
    def max_level(self) -> int:
        return len(self.q_mods) - 1

    @property
    def slots(self) -> int:
        return self.n // 2

    @property
    def alpha(self) -> int:
        """Limbs per key-switch digit."""
        return len(self.p_mods)

    @property
    def dnum(self) -> int:
        """Digit count of the hybrid key switch at the full chain."""
        return -(-len(self.q_mods) // self.alpha)

    def digest(self) -> str:
        txt = "|".join(
            [
                "hcnn-params-v1",
                str(self.n),
                format(self.delta, ".17g"),
                ",".join(str(m.q) for m in self.q_mods),
                ",".join(str(m.q) for m in self.p_mods),
            ]
        )
        return hashlib.sha256(txt.encode()).hexdigest()

    def mods_at(self, level: int) -> tuple[Modulus, ...]:
        if not 0 <= level <= self.max_level:
            raise LevelError(f"level {level} outside chain")
        return self.q_mods[: level + 1]

    def ext_mods(self, level: int) -> tuple[Modulus, ...]:
        return self.mods_at(level) + self.p_mods

    @classmethod
    def build(cls, name: str, n: int, log_q0: int, log_qi: int, levels: int,
              log_p: int, n_special: int, delta: float | None = None,
              toy: bool = True) -> "CkksParams":
        q0 = find_ntt_primes(n, log_q0, 1)
        qi = find_ntt_primes(n, log_qi, levels, avoid=q0, alternate=True)
        ps = find_ntt_primes(n, log_p, n_special, avoid=q0 + qi)
        return cls(
            name=name,
            n=n,
            q_mods=tuple(Modulus.make(q) for q in q0 + qi),
            p_mods=tuple(Modulus.make(p) for p in ps),
            delta=float(2**log_qi) if delta is None else delta,
            toy=toy,
        )


_params_cache: dict[str, CkksParams] = {}


def desk_a() -> CkksParams:
    """N=2^13, one 59-bit q_0, ten 40-bit rescaling primes, two 59-bit
    specials, scale 2^40. Toy parameters for op-level precision work."""
    if "desk-A" not in _params_cache:
        _params_cache["desk-A"] = CkksParams.build("desk-A", 1 << 13, 59, 40, 10, 59, 2)
    return _params_cache["desk-A"]


def desk_b() -> CkksParams:
    """N=2^14, 16 rescaling levels, four 59-bit specials. Toy parameters
    sized for the end-to-end packed CNN."""
    if "desk-B" not in _params_cache:
        _params_cache["desk-B"] = CkksParams.build("desk-B", 1 << 14, 59, 40, 16, 59, 4)
    return _params_cache["desk-B"]


def unit() -> CkksParams:
    """N=2^11, eleven 40-bit levels. Small enough for fast CLI and unit
    work; everything about it is insecure."""
    if "unit" not in _params_cache:
        _params_cache["unit"] = CkksParams.build("unit", 1 << 11, 50, 40, 11, 50, 2)
    return _params_cache["unit"]


def params_by_name(name: str) -> CkksParams:
    if name == "desk-A":
        return desk_a()
    if name == "desk-B":
        return desk_b()
    if name == "unit":
        return unit()
    raise ParameterError(f"unknown parameter set {name!r}")


# ---------------------------------------------------------------------------
# plaintexts / ciphertexts
# ---------------------------------------------------------------------------

@dataclass
class Plaintext:
    poly: RnsPoly         # Evaluation domain
    scale: float

    @property
    def level(self) -> int:
        return self.poly.nlimbs - 1


@dataclass
class Ciphertext:
    c0: RnsPoly           # Evaluation domain
    c1: RnsPoly
    scale: float
    n: int

    @property
    def level(self) -> int:
        return self.c0.nlimbs - 1

    @property
    def slots(self) -> int:
        return self.n // 2

    def copy(self) -> "Ciphertext":
        return Ciphertext(self.c0.copy(), self.c1.copy(), self.scale, self.n)


# ---------------------------------------------------------------------------
# canonical embedding
# ---------------------------------------------------------------------------

_embed_cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _embedding_maps(n: int):
    """Slot positions inside the odd-power FFT spectrum plus the half-turn
    twist exp(i*pi*k/n) aligning X^k with the 2N-th root."""
    maps = _embed_cache.get(n)
    if maps is not None:
        return maps
    slots = n // 2
    pos = np.empty(slots, dtype=np.int64)
    e = 1
    for j in range(slots):
        e5 = e  # 5^j mod 2n
        pos[j] = (e5 - 1) // 2
        e = (e * 5) % (2 * n)
    twist = np.exp(1j * np.pi * np.arange(n) / n)
    conj_pos = n - 1 - pos
    _embed_cache[n] = (pos, conj_pos, twist)
    return _embed_cache[n]


def encode(values: Sequence[complex], params: CkksParams, level: int,
           scale: float | None = None) -> Plaintext:
    """Embed up to N/2 values into a scaled integer polynomial at a level."""
    scale = float(params.delta) if scale is None else float(scale)
    vals = np.asarray(values, dtype=np.complex128)
    if vals.ndim != 1:
        raise ParameterError("encode expects a vector")
    slots = params.slots
    if vals.shape[0] > slots:
        raise ParameterError(f"{vals.shape[0]} values exceed {slots} slots")
    full = np.zeros(slots, dtype=np.complex128)
    full[: vals.shape[0]] = vals
    pos, conj_pos, twist = _embedding_maps(params.n)
    spec = np.zeros(params.n, dtype=np.complex128)
    spec[pos] = full
    spec[conj_pos] = np.conj(full)
    z = np.fft.fft(spec) / params.n
    coeffs = np.real(z * np.conj(twist)) * scale
    rounded = np.rint(coeffs)
    mods = params.mods_at(level)
    headroom = sum(np.log2(m.q) for m in mods) - 1
    peak = float(np.max(np.abs(rounded)))
    if peak >= float(1 << 62) or (peak > 0 and np.log2(peak) >= headroom):
        raise ScaleError("encoded coefficients overflow the basis headroom")
    ints = rounded.astype(np.int64)
    rows = np.empty((len(mods), params.n), dtype=np.uint64)
    for i, m in enumerate(mods):
        r = ints % np.int64(m.q)
        rows[i] = np.where(r < 0, r + np.int64(m.q), r).astype(np.uint64)
    poly = RnsPoly(mods, rows, Domain.COEFF)
    return Plaintext(poly=ntt_forward(poly), scale=scale)


def decode(pt: Plaintext, params: CkksParams, count: int | None = None,
           imag_tol: float | None = 0.05) -> np.ndarray:
    """Recover slot values; asserts residual imaginary parts stay small."""
    poly = ntt_inverse(pt.poly)
    bound = int(np.log2(max(pt.scale, 2.0))) + 34
    ints = to_int_coeffs(poly, bound_bits=bound)
    c = np.array([float(v) for v in ints])
    pos, _, twist = _embedding_maps(params.n)
    y = np.fft.ifft(c * twist) * params.n
    vals = y[pos] / pt.scale
    if imag_tol is not None and (count is None or count > 0):
        worst = float(np.max(np.abs(vals.imag[: count or len(vals)])))
        if worst > imag_tol:
            raise ScaleError(f"imaginary residue {worst:.3g} exceeds {imag_tol}")
    out = vals if count is None else vals[:count]
    return np.real(out)


# ---------------------------------------------------------------------------
# keys
# ---------------------------------------------------------------------------

@dataclass
class SwitchKey:
    """Per-digit key pairs over the extended basis, rows in Montgomery form.

    digit j of rows_b/rows_a has shape [L+1+k, N]; at level l the rows used
    are 0..l plus the special rows at the tail.
    """

    rows_b: list[np.ndarray]
    rows_a: list[np.ndarray]


@dataclass
class KeySet:
    params: CkksParams
    sk: RnsPoly                  # Evaluation domain over Q||P (kept: toy artifact)
    pk: tuple[RnsPoly, RnsPoly]  # over Q
    rlk: SwitchKey
    gks: dict[int, SwitchKey] = field(default_factory=dict)

    @property
    def rotation_steps(self) -> tuple[int, ...]:
        return tuple(sorted(self.gks))


def galois_element(step: int, n: int) -> int:
    """Group element sending slot j to slot j+step (cyclic over N/2)."""
    slots = n // 2
    return pow(5, step % slots, 2 * n)


def _const_rows(value_mod: list[int], mods: Sequence[Modulus]) -> list[int]:
    return value_mod


def _scalar_mul_rows(p: RnsPoly, consts: Sequence[int]) -> RnsPoly:
    """Multiply limb i by a per-limb scalar constant."""
    out = np.empty_like(p.coeffs)
    for i, m in enumerate(p.mods):
        cm = np.uint64(m.to_mont(consts[i] % m.q))
        out[i] = kernels.mulmod_mont(p.coeffs[i], cm, m.q, m.ninv)
    return RnsPoly(p.mods, out, p.domain)


def _make_switch_key(params: CkksParams, s_ext: RnsPoly, payload: RnsPoly,
                     rng: np.random.Generator) -> SwitchKey:
    """Keys k_j = (-a_j s + e_j + P*lambda_j*payload, a_j) over Q||P.

    lambda_j is the CRT interpolant that is 1 on digit j's primes and 0 on
    the other chain primes, so the same keys serve every level.
    """
    ext = params.q_mods + params.p_mods
    n = params.n
    alpha = params.alpha
    qs = [m.q for m in params.q_mods]
    p_int = 1
    for m in params.p_mods:
        p_int *= m.q
    q_full = 1
    for q in qs:
        q_full *= q
    rows_b: list[np.ndarray] = []
    rows_a: list[np.ndarray] = []
    for j in range(params.dnum):
        digit = qs[j * alpha : (j + 1) * alpha]
        d_prod = 1
        for q in digit:
            d_prod *= q
        q_hat = q_full // d_prod
        lam = q_hat * pow(q_hat % d_prod, -1, d_prod)
        consts = [(p_int * lam) % m.q for m in ext]
        a_j = ntt_forward(sample_poly(ext, n, "uniform", rng))
        e_j = ntt_forward(sample_poly(ext, n, "gaussian", rng))
        b_j = poly_add(
            poly_sub(e_j, poly_mul_pointwise(a_j, s_ext)),
            _scalar_mul_rows(s_ext if payload is None else payload, consts),
        )
        rows_b.append(to_mont_rows(b_j))
        rows_a.append(to_mont_rows(a_j))
    return SwitchKey(rows_b=rows_b, rows_a=rows_a)


def keygen(params: CkksParams, rng: np.random.Generator,
           rotations: Sequence[int] = ()) -> KeySet:
    """Secret/public/relinearisation keys plus exactly the requested
    rotation steps."""
    n = params.n
    ext = params.q_mods + params.p_mods
    s_coeff = sample_poly(ext, n, "ternary", rng)
    s_ext = ntt_forward(s_coeff)
    # public key over the q-chain only
    s_q = RnsPoly(params.q_mods, s_ext.coeffs[: len(params.q_mods)].copy(), Domain.EVAL)
    a = ntt_forward(sample_poly(params.q_mods, n, "uniform", rng))
    e = ntt_forward(sample_poly(params.q_mods, n, "gaussian", rng))
    pk_b = poly_sub(e, poly_mul_pointwise(a, s_q))
    rlk = _make_switch_key(params, s_ext, poly_mul_pointwise(s_ext, s_ext), rng)
    ks = KeySet(params=params, sk=s_ext, pk=(pk_b, a), rlk=rlk)
    for step in rotations:
        _add_rotation_key(ks, step, s_coeff, rng)
    return ks


def _add_rotation_key(ks: KeySet, step: int, s_coeff: RnsPoly,
                      rng: np.random.Generator) -> None:
    step = step % ks.params.slots
    if step == 0 or step in ks.gks:
        return
    g = galois_element(step, ks.params.n)
    s_rot = ntt_forward(automorphism(s_coeff, g))
    ks.gks[step] = _make_switch_key(ks.params, ks.sk, s_rot, rng)


# ---------------------------------------------------------------------------
# encrypt / decrypt
# ---------------------------------------------------------------------------

def encrypt(pt: Plaintext, ks: KeySet, rng: np.random.Generator) -> Ciphertext:
    params = ks.params
    level = pt.level
    mods = params.mods_at(level)
    n = params.n
    v = ntt_forward(sample_poly(mods, n, "ternary", rng))
    e0 = ntt_forward(sample_poly(mods, n, "gaussian", rng))
    e1 = ntt_forward(sample_poly(mods, n, "gaussian", rng))
    pk_b = RnsPoly(mods, ks.pk[0].coeffs[: level + 1].copy(), Domain.EVAL)
    pk_a = RnsPoly(mods, ks.pk[1].coeffs[: level + 1].copy(), Domain.EVAL)
    c0 = poly_add(poly_add(poly_mul_pointwise(v, pk_b), e0), pt.poly)
    c1 = poly_add(poly_mul_pointwise(v, pk_a), e1)
    return Ciphertext(c0=c0, c1=c1, scale=pt.scale, n=n)


def decrypt(ct: Ciphertext, ks: KeySet) -> Plaintext:
    mods = ct.c0.mods
    s = RnsPoly(mods, ks.sk.coeffs[: len(mods)].copy(), Domain.EVAL)
    m = poly_add(ct.c0, poly_mul_pointwise(ct.c1, s))
    return Plaintext(poly=m, scale=ct.scale)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

_SCALE_RTOL = 2.0**-10


def _check_add_compat(a_scale: float, b_scale: float, a_level: int, b_level: int):
    if a_level != b_level:
        raise LevelError(f"levels differ: {a_level} vs {b_level}")
    if abs(a_scale - b_scale) > _SCALE_RTOL * max(a_scale, b_scale):
        raise ScaleError(f"scales differ: {a_scale:.6g} vs {b_scale:.6g}")


def hadd(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_add_compat(a.scale, b.scale, a.level, b.level)
    return Ciphertext(poly_add(a.c0, b.c0), poly_add(a.c1, b.c1), a.scale, a.n)


def hsub(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _check_add_compat(a.scale, b.scale, a.level, b.level)
    return Ciphertext(poly_sub(a.c0, b.c0), poly_sub(a.c1, b.c1), a.scale, a.n)


def padd(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_add_compat(ct.scale, pt.scale, ct.level, pt.level)
    return Ciphertext(poly_add(ct.c0, pt.poly), ct.c1.copy(), ct.scale, ct.n)


def pmult(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    """Plaintext product; scales multiply, caller rescales."""
    if ct.level != pt.level:
        raise LevelError(f"levels differ: {ct.level} vs {pt.level}")
    mont = to_mont_rows(pt.poly)
    c0 = _mul_rows_mont(ct.c0, mont)
    c1 = _mul_rows_mont(ct.c1, mont)
    return Ciphertext(c0, c1, ct.scale * pt.scale, ct.n)


def _mul_rows_mont(p: RnsPoly, rows_mont: np.ndarray) -> RnsPoly:
    out = np.empty_like(p.coeffs)
    for i, m in enumerate(p.mods):
        out[i] = kernels.mulmod_mont(p.coeffs[i], rows_mont[i], m.q, m.ninv)
    return RnsPoly(p.mods, out, p.domain)


def pmult_mont(ct: Ciphertext, rows_mont: np.ndarray, pt_scale: float) -> Ciphertext:
    """pmult against a precomputed Montgomery-form mask (compiled graphs)."""
    c0 = _mul_rows_mont(ct.c0, rows_mont)
    c1 = _mul_rows_mont(ct.c1, rows_mont)
    return Ciphertext(c0, c1, ct.scale * pt_scale, ct.n)


def rescale(ct: Ciphertext, params: CkksParams) -> Ciphertext:
    """Drop the top limb, dividing the encrypted value by its prime."""
    level = ct.level
    if level == 0:
        raise LevelError("no limb left to rescale away")
    q_top = ct.c0.mods[-1]
    out_polys = []
    for poly in (ct.c0, ct.c1):
        top = RnsPoly((q_top,), poly.coeffs[-1:].copy(), Domain.EVAL)
        top_coeff = ntt_inverse(top).coeffs[0]
        rem_mods = poly.mods[:-1]
        lift = np.empty((len(rem_mods), poly.n), dtype=np.uint64)
        big = top_coeff > np.uint64(q_top.q // 2)
        for i, m in enumerate(rem_mods):
            r = top_coeff % np.uint64(m.q)
            adj = (r + np.uint64(m.q - (q_top.q % m.q))) % np.uint64(m.q)
            lift[i] = np.where(big, adj, r)
        lift_poly = ntt_forward(RnsPoly(rem_mods, lift, Domain.COEFF))
        body = RnsPoly(rem_mods, poly.coeffs[:-1].copy(), Domain.EVAL)
        diff = poly_sub(body, lift_poly)
        inv_consts = [pow(q_top.q, -1, m.q) for m in rem_mods]
        out_polys.append(_scalar_mul_rows(diff, inv_consts))
    return Ciphertext(out_polys[0], out_polys[1], ct.scale / q_top.q, ct.n)


def mod_drop(ct: Ciphertext, target_level: int) -> Ciphertext:
    """Shorten the basis without touching the scale (residual alignment)."""
    if target_level > ct.level:
        raise LevelError("cannot raise a ciphertext's level")
    keep = target_level + 1
    return Ciphertext(
        RnsPoly(ct.c0.mods[:keep], ct.c0.coeffs[:keep].copy(), Domain.EVAL),
        RnsPoly(ct.c1.mods[:keep], ct.c1.coeffs[:keep].copy(), Domain.EVAL),
        ct.scale,
        ct.n,
    )


# ---------------------------------------------------------------------------
# key switching
# ---------------------------------------------------------------------------

def _keyswitch_coeff(d_coeff: RnsPoly, key: SwitchKey, params: CkksParams
                     ) -> tuple[RnsPoly, RnsPoly]:
    """Switch a Coefficient-domain polynomial over q_0..q_l to the target
    secret; returns an Evaluation-domain pair over the same basis."""
    level = d_coeff.nlimbs - 1
    n = d_coeff.n
    ext = params.ext_mods(level)
    n_q = level + 1
    n_ext = len(ext)
    alpha = params.alpha
    full_l = len(params.q_mods)

    acc0 = np.zeros((n_ext, n), dtype=np.uint64)
    acc1 = np.zeros((n_ext, n), dtype=np.uint64)
    n_digits = -(-n_q // alpha)
    for j in range(n_digits):
        lo = j * alpha
        hi = min(lo + alpha, n_q)
        digit_mods = d_coeff.mods[lo:hi]
        digit = RnsPoly(digit_mods, d_coeff.coeffs[lo:hi].copy(), Domain.COEFF)
        others = tuple(m for i, m in enumerate(ext) if not (lo <= i < hi))
        raised_rows = np.empty((n_ext, n), dtype=np.uint64)
        raised_rows[lo:hi] = digit.coeffs
        conv = base_convert(digit, others)
        oi = 0
        for i in range(n_ext):
            if lo <= i < hi:
                continue
            raised_rows[i] = conv.coeffs[oi]
            oi += 1
        raised = ntt_forward(RnsPoly(ext, raised_rows, Domain.COEFF))
        # key rows for the current basis: q rows 0..level then the specials
        sel = list(range(n_q)) + list(range(full_l, full_l + len(params.p_mods)))
        kb = key.rows_b[j]
        ka = key.rows_a[j]
        for r, row in enumerate(sel):
            m = ext[r]
            acc0[r] = kernels.muladd_mont(acc0[r], raised.coeffs[r], kb[row], m.q, m.ninv)
            acc1[r] = kernels.muladd_mont(acc1[r], raised.coeffs[r], ka[row], m.q, m.ninv)

    # divide out the special primes
    p_int = 1
    for m in params.p_mods:
        p_int *= m.q
    q_mods = d_coeff.mods
    out = []
    for acc in (acc0, acc1):
        p_part = RnsPoly(params.p_mods, acc[n_q:].copy(), Domain.EVAL)
        p_coeff = ntt_inverse(p_part)
        lift = ntt_forward(base_convert(p_coeff, q_mods))
        body = RnsPoly(q_mods, acc[:n_q].copy(), Domain.EVAL)
        diff = poly_sub(body, lift)
        inv_consts = [pow(p_int % m.q, -1, m.q) for m in q_mods]
        out.append(_scalar_mul_rows(diff, inv_consts))
    return out[0], out[1]


def hmult(a: Ciphertext, b: Ciphertext, ks: KeySet) -> Ciphertext:
    """Tensor product plus relinearisation; caller rescales."""
    if a.level != b.level:
        raise LevelError(f"levels differ: {a.level} vs {b.level}")
    d0 = poly_mul_pointwise(a.c0, b.c0)
    d1 = poly_add(poly_mul_pointwise(a.c0, b.c1), poly_mul_pointwise(a.c1, b.c0))
    d2 = poly_mul_pointwise(a.c1, b.c1)
    ks0, ks1 = _keyswitch_coeff(ntt_inverse(d2), ks.rlk, ks.params)
    return Ciphertext(poly_add(d0, ks0), poly_add(d1, ks1), a.scale * b.scale, a.n)


def square(a: Ciphertext, ks: KeySet) -> Ciphertext:
    return hmult(a, a, ks)


def _apply_step(ct: Ciphertext, step: int, ks: KeySet) -> Ciphertext:
    g = galois_element(step, ct.n)
    c0_rot = ntt_forward(automorphism(ntt_inverse(ct.c0), g))
    a_rot = automorphism(ntt_inverse(ct.c1), g)
    ks0, ks1 = _keyswitch_coeff(a_rot, ks.gks[step], ks.params)
    return Ciphertext(poly_add(c0_rot, ks0), ks1, ct.scale, ct.n)


def rotation_plan(step: int, available: Sequence[int], slots: int) -> list[int]:
    """Steps to compose for a left rotation; raises when not coverable."""
    step %= slots
    if step == 0:
        return []
    if step in available:
        return [step]
    plan = []
    rem = step
    for s in sorted(available, reverse=True):
        while rem >= s:
            plan.append(s)
            rem -= s
    if rem != 0:
        raise KeyError_(f"no rotation key path for step {step}")
    return plan


def rotate(ct: Ciphertext, k: int, ks: KeySet) -> Ciphertext:
    """Cyclic left rotation of the slot vector by k (negative: right).

    Composite steps fall back to a sum over available keys, spending one
    key switch per component (extra noise per component, same scale).
    """
    k %= ct.slots
    if k == 0:
        return ct.copy()
    for step in rotation_plan(k, tuple(ks.gks), ct.slots):
        ct = _apply_step(ct, step, ks)
    return ct


# ---------------------------------------------------------------------------
# debug refresh
# ---------------------------------------------------------------------------

_refresh_warned = False


def debug_refresh(ct: Ciphertext, ks: KeySet, target_level: int | None = None,
                  rng: np.random.Generator | None = None) -> Ciphertext:
    """Decrypt-reencode-reencrypt in place of bootstrapping.

    Only usable with HCNN_TEST_MODE=1; every use emits an insecurity
    warning, and executors record it in their reports.
    """
    global _refresh_warned
    if not test_mode_enabled():
        raise RefreshError(
            f"debug refresh requires {TEST_MODE_ENV}=1; it decrypts internally"
        )
    params = ks.params
    target = params.max_level - 1 if target_level is None else target_level
    if not _refresh_warned:
        print(
            "WARNING: debug refresh decrypts under the hood; outputs are NOT secure",
            file=sys.stderr,
        )
        _refresh_warned = True
    vals = decode(decrypt(ct, ks), params, imag_tol=None)
    pt = encode(vals, params, target, ct.scale)
    rng = np.random.default_rng(0x5EED) if rng is None else rng
    return encrypt(pt, ks, rng)


def mask_scale_for(params: CkksParams, level: int, in_scale: float,
                   out_scale: float | None = None) -> float:
    """Plaintext scale making in_scale * mask / q_level land on out_scale."""
    target = float(params.delta) if out_scale is None else out_scale
    return params.q_mods[level].q * target / in_scale
