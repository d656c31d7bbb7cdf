#!/usr/bin/env python3
"""Negacyclic polynomial products in the residue ring.

Multiplies two polynomials mod X^N + 1 the fast way (forward transform,
pointwise product, inverse transform) and checks the result against a
schoolbook convolution done in plain integer arithmetic.
"""

import numpy as np

from hcnn.ring import (
    Modulus,
    find_ntt_primes,
    from_int_coeffs,
    ntt_forward,
    ntt_inverse,
    poly_mul_pointwise,
    to_int_coeffs,
)


def schoolbook(a, b, n):
    out = [0] * n
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            if i + j < n:
                out[i + j] += ai * bj
            else:
                out[i + j - n] -= ai * bj
    return out


def main():
    n = 16
    qs = find_ntt_primes(n, 59, 2)
    mods = tuple(Modulus.make(q) for q in qs)
    print(f"ring Z[X]/(X^{n}+1), limb primes {qs[0]} and {qs[1]}")

    rng = np.random.default_rng(1)
    a = rng.integers(-50, 50, size=n).tolist()
    b = rng.integers(-50, 50, size=n).tolist()

    pa = from_int_coeffs(a, mods, n)
    pb = from_int_coeffs(b, mods, n)
    prod = ntt_inverse(poly_mul_pointwise(ntt_forward(pa), ntt_forward(pb)))
    got = to_int_coeffs(prod)
    want = schoolbook(a, b, n)

    print(f"a      = {a}")
    print(f"b      = {b}")
    print(f"a*b    = {got}")
    print(f"oracle = {want}")
    assert got == want, "transform product disagrees with schoolbook"
    print("exact match, negacyclic wraparound included")

    # the wraparound in one line: x^(n-1) * x = -1
    xa = from_int_coeffs([0] * (n - 1) + [1], mods, n)
    xb = from_int_coeffs([0, 1], mods, n)
    wrap = ntt_inverse(poly_mul_pointwise(ntt_forward(xa), ntt_forward(xb)))
    print(f"x^{n - 1} * x = {to_int_coeffs(wrap)[0]} (constant term), "
          "as X^N = -1 demands")


if __name__ == "__main__":
    main()
