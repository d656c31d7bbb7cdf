"""Vectorised modular-arithmetic kernels over uint64 arrays.

Products of two residues can reach 124 bits, so every multiply is emulated
with 32-bit limb splitting and reduced with Montgomery's REDC; moduli are
capped at 2^62 so all intermediates fit in uint64 (numpy and numba both
wrap silently, which the algorithms rely on).

Two backends expose the same functions: a numba-jitted one (default) and a
pure numpy one (forced with HCNN_NO_NUMBA=1). The numpy backend doubles as
an independent cross-check in the test suite.

Convention used throughout: polynomial data stays in the ordinary residue
domain; the *precomputable* side of every product (twiddle factors, key
material, plaintext masks, base-conversion tables) is stored in Montgomery
form, so each product costs a single REDC.
"""

from __future__ import annotations

import os

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_SH32 = np.uint64(32)
_ZERO = np.uint64(0)


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _np_mul128(a, b):
    """Full 64x64 -> 128 bit product as a (hi, lo) pair of uint64 arrays."""
    a_lo = a & _MASK32
    a_hi = a >> _SH32
    b_lo = b & _MASK32
    b_hi = b >> _SH32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _SH32) + (p1 & _MASK32) + (p2 & _MASK32)
    lo = (p0 & _MASK32) | ((mid & _MASK32) << _SH32)
    hi = p3 + (p1 >> _SH32) + (p2 >> _SH32) + (mid >> _SH32)
    return hi, lo


def _np_redc(hi, lo, q, ninv):
    # (hi*2^64 + lo) * 2^-64 mod q, for hi < q. ninv = -q^-1 mod 2^64.
    m = lo * ninv
    mq_hi, _ = _np_mul128(m, q)
    t = hi + mq_hi + (lo != _ZERO)
    return np.where(t >= q, t - q, t)


def _np_mulmod_mont(a, b_mont, q, ninv):
    hi, lo = _np_mul128(a, b_mont)
    return _np_redc(hi, lo, q, ninv)


def _np_muladd_mont(acc, a, b_mont, q, ninv):
    t = acc + _np_mulmod_mont(a, b_mont, q, ninv)
    np.subtract(t, q, out=t, where=t >= q)
    return t


def _np_addmod(a, b, q):
    t = a + b
    np.subtract(t, q, out=t, where=t >= q)
    return t


def _np_submod(a, b, q):
    return np.where(a >= b, a - b, a + (q - b))


def _np_negmod(a, q):
    return np.where(a == _ZERO, a, q - a)


def _np_ntt_inplace(a, wtab, q, ninv):
    """Cooley-Tukey negacyclic forward transform, natural -> bit-reversed."""
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        view = a[: 2 * m * t].reshape(m, 2, t)
        u = view[:, 0, :]
        w = wtab[m : 2 * m].reshape(m, 1)
        v = _np_mulmod_mont(view[:, 1, :], w, q, ninv)
        hi = u + v
        np.subtract(hi, q, out=hi, where=hi >= q)
        lo = np.where(u >= v, u - v, u + (q - v))
        view[:, 0, :] = hi
        view[:, 1, :] = lo
        m <<= 1


def _np_intt_inplace(a, iwtab, q, ninv, n_inv_mont):
    """Gentleman-Sande negacyclic inverse, bit-reversed -> natural."""
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        h = m >> 1
        view = a.reshape(h, 2, t)
        u = view[:, 0, :].copy()
        v = view[:, 1, :]
        w = iwtab[h : 2 * h].reshape(h, 1)
        s = u + v
        np.subtract(s, q, out=s, where=s >= q)
        d = np.where(u >= v, u - v, u + (q - v))
        view[:, 0, :] = s
        view[:, 1, :] = _np_mulmod_mont(d, w, q, ninv)
        t <<= 1
        m = h
    a[:] = _np_mulmod_mont(a, np.uint64(n_inv_mont), q, ninv)


def _np_fbc_row(out, ys, src_qs, src_halves, tcol_mont, q, ninv):
    """Accumulate one target row of a centred fast base conversion.

    ys[i] holds digits in [0, q_i); digits above q_i/2 contribute as
    y_i - q_i, i.e. the conversion works on the centred representative.
    """
    for i in range(ys.shape[0]):
        y = ys[i]
        qi = np.uint64(src_qs[i])
        tm = np.uint64(tcol_mont[i])
        pos = _np_mulmod_mont(y, tm, q, ninv)
        neg = _np_mulmod_mont(qi - y, tm, q, ninv)
        neg = np.where(neg == _ZERO, _ZERO, q - neg)
        term = np.where(y <= np.uint64(src_halves[i]), pos, neg)
        out[:] = _np_addmod(out, term, q)


_NUMPY_BACKEND = {
    "mulmod_mont": lambda a, b, q, ninv: _np_mulmod_mont(a, b, np.uint64(q), np.uint64(ninv)),
    "muladd_mont": lambda acc, a, b, q, ninv: _np_muladd_mont(acc, a, b, np.uint64(q), np.uint64(ninv)),
    "addmod": lambda a, b, q: _np_addmod(a, b, np.uint64(q)),
    "submod": lambda a, b, q: _np_submod(a, b, np.uint64(q)),
    "negmod": lambda a, q: _np_negmod(a, np.uint64(q)),
    "ntt_inplace": lambda a, wtab, q, ninv: _np_ntt_inplace(a, wtab, np.uint64(q), np.uint64(ninv)),
    "intt_inplace": lambda a, iw, q, ninv, nim: _np_intt_inplace(a, iw, np.uint64(q), np.uint64(ninv), nim),
    "fbc_row": _np_fbc_row,
    "name": "numpy",
}


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

def _build_numba_backend():
    import numba as nb

    U0 = np.uint64(0)
    U1 = np.uint64(1)
    M32 = np.uint64(0xFFFFFFFF)
    S32 = np.uint64(32)

    @nb.njit(cache=True, inline="always")
    def _mulhi(a, b):
        a_lo = a & M32
        a_hi = a >> S32
        b_lo = b & M32
        b_hi = b >> S32
        p0 = a_lo * b_lo
        p1 = a_lo * b_hi
        p2 = a_hi * b_lo
        p3 = a_hi * b_hi
        mid = (p0 >> S32) + (p1 & M32) + (p2 & M32)
        return p3 + (p1 >> S32) + (p2 >> S32) + (mid >> S32)

    @nb.njit(cache=True, inline="always")
    def _redc(a, b, q, ninv):
        # a*b * 2^-64 mod q with a, b < 2^62
        lo = a * b
        hi = _mulhi(a, b)
        m = lo * ninv
        t = hi + _mulhi(m, q)
        if lo != U0:
            t += U1
        if t >= q:
            t -= q
        return t

    @nb.njit(cache=True)
    def _k_mulmod(out, a, bm, q, ninv):
        for i in range(a.shape[0]):
            out[i] = _redc(a[i], bm[i], q, ninv)

    @nb.njit(cache=True)
    def _k_mulmod_scalar_b(out, a, bm, q, ninv):
        for i in range(a.shape[0]):
            out[i] = _redc(a[i], bm, q, ninv)

    @nb.njit(cache=True)
    def _k_muladd(acc, a, bm, q, ninv):
        for i in range(a.shape[0]):
            t = acc[i] + _redc(a[i], bm[i], q, ninv)
            if t >= q:
                t -= q
            acc[i] = t

    @nb.njit(cache=True)
    def _k_addmod(out, a, b, q):
        for i in range(a.shape[0]):
            t = a[i] + b[i]
            if t >= q:
                t -= q
            out[i] = t

    @nb.njit(cache=True)
    def _k_submod(out, a, b, q):
        for i in range(a.shape[0]):
            if a[i] >= b[i]:
                out[i] = a[i] - b[i]
            else:
                out[i] = a[i] + (q - b[i])

    @nb.njit(cache=True)
    def _k_negmod(out, a, q):
        for i in range(a.shape[0]):
            if a[i] == U0:
                out[i] = U0
            else:
                out[i] = q - a[i]

    @nb.njit(cache=True)
    def _k_ntt(a, wtab, q, ninv):
        n = a.shape[0]
        t = n
        m = 1
        while m < n:
            t >>= 1
            for i in range(m):
                s = wtab[m + i]
                j1 = 2 * i * t
                for j in range(j1, j1 + t):
                    u = a[j]
                    v = _redc(a[j + t], s, q, ninv)
                    hi = u + v
                    if hi >= q:
                        hi -= q
                    a[j] = hi
                    if u >= v:
                        a[j + t] = u - v
                    else:
                        a[j + t] = u + (q - v)
            m <<= 1

    @nb.njit(cache=True)
    def _k_intt(a, iwtab, q, ninv, n_inv_mont):
        n = a.shape[0]
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            j1 = 0
            for i in range(h):
                s = iwtab[h + i]
                for j in range(j1, j1 + t):
                    u = a[j]
                    v = a[j + t]
                    hi = u + v
                    if hi >= q:
                        hi -= q
                    a[j] = hi
                    if u >= v:
                        d = u - v
                    else:
                        d = u + (q - v)
                    a[j + t] = _redc(d, s, q, ninv)
                j1 += 2 * t
            t <<= 1
            m = h
        for j in range(n):
            a[j] = _redc(a[j], n_inv_mont, q, ninv)

    @nb.njit(cache=True)
    def _k_fbc_row(out, ys, src_qs, src_halves, tcol_mont, q, ninv):
        n = out.shape[0]
        for i in range(ys.shape[0]):
            qi = src_qs[i]
            half = src_halves[i]
            tm = tcol_mont[i]
            for k in range(n):
                y = ys[i, k]
                if y <= half:
                    term = _redc(y, tm, q, ninv)
                else:
                    term = _redc(qi - y, tm, q, ninv)
                    if term != U0:
                        term = q - term
                acc = out[k] + term
                if acc >= q:
                    acc -= q
                out[k] = acc

    def mulmod_mont(a, b, q, ninv):
        out = np.empty_like(a)
        if b.ndim == 0 or b.shape == ():
            _k_mulmod_scalar_b(out, a, np.uint64(b), np.uint64(q), np.uint64(ninv))
        else:
            _k_mulmod(out, a, b, np.uint64(q), np.uint64(ninv))
        return out

    def muladd_mont(acc, a, b, q, ninv):
        _k_muladd(acc, a, b, np.uint64(q), np.uint64(ninv))
        return acc

    def addmod(a, b, q):
        out = np.empty_like(a)
        _k_addmod(out, a, b, np.uint64(q))
        return out

    def submod(a, b, q):
        out = np.empty_like(a)
        _k_submod(out, a, b, np.uint64(q))
        return out

    def negmod(a, q):
        out = np.empty_like(a)
        _k_negmod(out, a, np.uint64(q))
        return out

    def ntt_inplace(a, wtab, q, ninv):
        _k_ntt(a, wtab, np.uint64(q), np.uint64(ninv))

    def intt_inplace(a, iwtab, q, ninv, n_inv_mont):
        _k_intt(a, iwtab, np.uint64(q), np.uint64(ninv), np.uint64(n_inv_mont))

    def fbc_row(out, ys, src_qs, src_halves, tcol_mont, q, ninv):
        _k_fbc_row(out, ys, src_qs, src_halves, tcol_mont, np.uint64(q), np.uint64(ninv))

    return {
        "mulmod_mont": mulmod_mont,
        "muladd_mont": muladd_mont,
        "addmod": addmod,
        "submod": submod,
        "negmod": negmod,
        "ntt_inplace": ntt_inplace,
        "intt_inplace": intt_inplace,
        "fbc_row": fbc_row,
        "name": "numba",
    }


def _select_backend():
    if os.environ.get("HCNN_NO_NUMBA", "") == "1":
        return _NUMPY_BACKEND
    try:
        return _build_numba_backend()
    except Exception:  # pragma: no cover - numba absent or broken
        return _NUMPY_BACKEND


_BACKEND = _select_backend()

mulmod_mont = _BACKEND["mulmod_mont"]
muladd_mont = _BACKEND["muladd_mont"]
addmod = _BACKEND["addmod"]
submod = _BACKEND["submod"]
negmod = _BACKEND["negmod"]
ntt_inplace = _BACKEND["ntt_inplace"]
intt_inplace = _BACKEND["intt_inplace"]
fbc_row = _BACKEND["fbc_row"]
BACKEND_NAME = _BACKEND["name"]

numpy_backend = _NUMPY_BACKEND


def set_num_threads(n: int) -> None:
    """Cap worker threads used by the jitted backend (no-op for numpy)."""
    if BACKEND_NAME == "numba":
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
