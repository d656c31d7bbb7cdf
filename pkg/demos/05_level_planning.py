#!/usr/bin/env python3
"""Level budgeting and refresh placement for a residual stack.

Builds two residual basic blocks (12 levels of work) against a chain with
11, so the planner has to buy headroom exactly once. Shows the per-layer
ledger, where the refresh goes and why, then runs the plan encrypted and
checks the output. The debug refresh decrypts internally, hence the test
mode gate and the insecure flag on the report.
"""

import os

os.environ.setdefault("HCNN_TEST_MODE", "1")  # permits the debug refresh

import numpy as np

from hcnn import ckks
from hcnn.graph import (
    build_graph,
    execute,
    gen_fixture,
    plan_levels,
    required_rotation_steps,
)
from hcnn.packing import encrypt_tensor, decrypt_tensor


def main():
    params = ckks.unit()
    fx = gen_fixture("basic-block-stack(2)", 5, params)
    g = build_graph("basic-block-stack(2)", fx, multiplex=4)

    print("layer ledger (levels spent):")
    for layer, cost in zip(g.layers, g.level_costs()):
        print(f"  {layer.name:10s} {cost}")
    total = g.total_level_cost()
    print(f"total {total} against a {params.max_level}-level chain\n")

    plan = plan_levels(g, params.max_level)
    print(f"plan: entry levels {list(plan.entry_levels)}")
    print(f"      refresh before layer {plan.refresh_points[0]} "
          f"({g.layers[plan.refresh_points[0]].name}), "
          f"back to level {plan.refresh_target_level}")
    print("      placement minimizes refreshes first, then the number of "
          "live ciphertexts lifted\n")

    rng = np.random.default_rng(6)
    steps = required_rotation_steps(g, params.slots)
    ks = ckks.keygen(params, rng, rotations=sorted(steps))
    x = np.asarray(fx["golden"][0]["input"])
    packed = encrypt_tensor(x, g.input_format, ks, rng, plan.entry_levels[0])
    out, report = execute(g, plan, packed, ks, "encrypted")

    ref, _ = execute(g, plan, x, mode="plaintext-ref")
    diff = np.abs(decrypt_tensor(out, ks) - ref).max()
    refreshes = sum(row["tally"]["refreshes"] for row in report.per_layer)
    print(f"encrypted run: {refreshes} ciphertext refreshes, "
          f"output error {diff:.2e}, insecure={report.insecure}")


if __name__ == "__main__":
    main()
