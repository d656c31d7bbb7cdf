"""Replay of trainer-exported goldens through both executors.

These tests only run when the trained bundle exists (build the frontend
package and run its CLI to produce it); without the artifact they skip
rather than fail, so the main suite stays self-contained.
"""

from pathlib import Path

import numpy as np
import pytest

from hcnn import ckks
from hcnn.graph import (
    build_graph,
    execute,
    load_weights,
    plan_levels,
    required_rotation_steps,
    weights_digest,
)
from hcnn.packing import encrypt_tensor, read_logits

BUNDLE = Path(__file__).resolve().parent.parent / "frontend" / "out" / \
    "tiny-cnn-trained.json"


@pytest.fixture(scope="module")
def trained():
    if not BUNDLE.exists():
        pytest.skip(f"no trained bundle at {BUNDLE}; "
                    "run the frontend trainer to produce it")
    obj = load_weights(str(BUNDLE))
    if not obj.get("golden"):
        pytest.skip("trained bundle carries no goldens")
    return obj


def test_bundle_digest_is_canonical(trained):
    # recomputing over a reparse must land on the same digest
    assert weights_digest(trained) == weights_digest(
        load_weights(str(BUNDLE)))
    assert len(trained["golden"]) >= 1
    assert trained["topology"] == "tiny-cnn"


def test_goldens_replay_in_plaintext_ref(trained):
    g = build_graph("tiny-cnn", trained, multiplex=4)
    params = ckks.unit()
    plan = plan_levels(g, params.max_level)
    worst = 0.0
    for golden in trained["golden"]:
        x = np.asarray(golden["input"], dtype=np.float64)
        logits, _ = execute(g, plan, x, mode="plaintext-ref")
        want = np.asarray(golden["logits"], dtype=np.float64)
        worst = max(worst, float(np.abs(logits - want).max()))
    assert worst < 1e-4, f"plaintext-ref drift {worst:.2e}"


def test_goldens_replay_encrypted(trained):
    params = ckks.unit()
    g = build_graph("tiny-cnn", trained, multiplex=4)
    plan = plan_levels(g, params.max_level)
    rng = np.random.default_rng(0x5EC0)
    steps = required_rotation_steps(g, params.slots)
    ks = ckks.keygen(params, rng, rotations=sorted(steps))
    cache: dict = {}
    worst = 0.0
    agree = 0
    for golden in trained["golden"]:
        x = np.asarray(golden["input"], dtype=np.float64)
        packed = encrypt_tensor(x, g.input_format, ks, rng,
                                plan.entry_levels[0])
        out, _ = execute(g, plan, packed, ks, "encrypted", cache=cache)
        logits = read_logits(out, g.n_classes, g.formats[-1], ks)
        want = np.asarray(golden["logits"], dtype=np.float64)
        worst = max(worst, float(np.abs(logits - want).max()))
        agree += int(np.argmax(logits) == np.argmax(want))
    assert worst < 1e-2, f"encrypted drift {worst:.2e}"
    assert agree == len(trained["golden"])
