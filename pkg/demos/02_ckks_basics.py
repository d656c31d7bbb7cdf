#!/usr/bin/env python3
"""Encrypted slot arithmetic end to end.

Encode, encrypt, add, multiply with rescale, rotate; print the level and
scale bookkeeping at each step and the error against plain numpy. Uses the
small insecure "unit" parameter set so the whole run takes a few seconds.
"""

import numpy as np

from hcnn import ckks


def err(ks, ct, want, params):
    got = ckks.decode(ckks.decrypt(ct, ks), params)[: len(want)]
    return float(np.abs(got - want).max())


def main():
    params = ckks.unit()
    print(f"params {params.name}: N={params.n}, slots={params.slots}, "
          f"levels 0..{params.max_level}, delta=2^{round(np.log2(params.delta))}")
    print("(desk-scale parameters: no security whatsoever)\n")

    rng = np.random.default_rng(2)
    ks = ckks.keygen(params, rng, rotations=[1, 4])

    a = rng.uniform(-1, 1, params.slots)
    b = rng.uniform(-1, 1, params.slots)
    top = params.max_level
    ca = ckks.encrypt(ckks.encode(a, params, top), ks, rng)
    cb = ckks.encrypt(ckks.encode(b, params, top), ks, rng)
    print(f"fresh ciphertext: level {ca.level}, scale 2^{np.log2(ca.scale):.1f}, "
          f"decrypt error {err(ks, ca, a, params):.2e}")

    cs = ckks.hadd(ca, cb)
    print(f"hadd:             level {cs.level}, error "
          f"{err(ks, cs, a + b, params):.2e}")

    cp = ckks.hmult(ca, cb, ks)
    print(f"hmult:            level {cp.level}, scale 2^{np.log2(cp.scale):.1f} "
          "(squared, needs a rescale)")
    cp = ckks.rescale(cp, params)
    print(f"rescale:          level {cp.level}, scale 2^{np.log2(cp.scale):.1f}, "
          f"error {err(ks, cp, a * b, params):.2e}")

    cr = ckks.rotate(ca, 4, ks)
    print(f"rotate by 4:      error {err(ks, cr, np.roll(a, -4), params):.2e} "
          "(left rotation: slot k takes slot k+4)")

    pt = ckks.encode(np.full(params.slots, 0.5), params, cp.level, cp.scale)
    cc = ckks.padd(cp, pt)
    print(f"padd 0.5:         error {err(ks, cc, a * b + 0.5, params):.2e}")


if __name__ == "__main__":
    main()
