#!/usr/bin/env python3
"""One encrypted CNN inference, end to end.

Generates a seeded random tiny-cnn weights bundle, packs and encrypts an
input, runs the network under homomorphic encryption, and compares the
decrypted logits against the plaintext reference executor and the bundled
golden. Prints the per-layer cost report at the end.

The same flow is scriptable from the shell:

    hcnn gen-fixture --topology tiny-cnn --seed 42 --out w.json
    hcnn keygen --weights w.json --out keys.bin
    hcnn encrypt --keys keys.bin --weights w.json --input x.json --out x.ct
    hcnn infer --keys keys.bin --weights w.json --input x.ct --out y.ct
    hcnn decrypt --keys keys.bin --input y.ct
"""

import numpy as np

from hcnn import ckks
from hcnn.graph import (
    build_graph,
    execute,
    gen_fixture,
    plan_levels,
    required_rotation_steps,
    weights_digest,
)
from hcnn.packing import encrypt_tensor, read_logits


def main():
    params = ckks.unit()
    fx = gen_fixture("tiny-cnn", 42, params)
    g = build_graph("tiny-cnn", fx, multiplex=4)
    print(f"topology tiny-cnn, weights digest {weights_digest(fx)[:16]}...")

    plan = plan_levels(g, params.max_level)
    print(f"level plan {list(plan.entry_levels)}, no refresh needed\n")

    rng = np.random.default_rng(7)
    steps = required_rotation_steps(g, params.slots)
    ks = ckks.keygen(params, rng, rotations=sorted(steps))
    print(f"keys ready: {len(steps)} rotation steps")

    x = np.asarray(fx["golden"][0]["input"])
    packed = encrypt_tensor(x, g.input_format, ks, rng, plan.entry_levels[0])
    out, report = execute(g, plan, packed, ks, "encrypted")
    logits = read_logits(out, g.n_classes, g.formats[-1], ks)

    ref, _ = execute(g, plan, x, mode="plaintext-ref")
    golden = np.asarray(fx["golden"][0]["logits"])
    print(f"logits: {np.round(logits, 4).tolist()}")
    print(f"vs plaintext-ref: {np.abs(logits - ref).max():.2e}")
    print(f"vs bundled golden: {np.abs(logits - golden).max():.2e}")
    print(f"predicted class {int(np.argmax(logits))}, "
          f"golden class {int(np.argmax(golden))}\n")

    print("per-layer costs:")
    print(f"  {'layer':12s} {'rot':>4s} {'hmult':>6s} {'pmult':>6s} {'ms':>7s}")
    for row in report.per_layer:
        t = row["tally"]
        print(f"  {row['name']:12s} {t['rotations']:4d} {t['hmults']:6d} "
              f"{t['pmults']:6d} {row['ms']:7.0f}")
    tot = report.totals()
    print(f"  {'total':12s} {tot.rotations:4d} {tot.hmults:6d} "
          f"{tot.pmults:6d}")
    print(f"\ninsecure={report.insecure} (desk-scale parameters)")


if __name__ == "__main__":
    main()
