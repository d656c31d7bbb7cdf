"""Graph construction, level planning, and executor equivalence.

The planner is checked against an exhaustive oracle that tries every
refresh subset; the executors are checked against each other and against
the vanilla dense forward pass, which shares no code with the graph
machinery.
"""

import copy
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, assume
from hypothesis import strategies as st

from hcnn import ckks, graph, packing
from hcnn.ckks import CkksParams
from hcnn.errors import GraphError, ParameterError, PlanError, SerializationError
from hcnn.graph import (
    HcnnGraph,
    Layer,
    LevelPlan,
    build_graph,
    cost_report_compare,
    execute,
    gen_fixture,
    load_weights,
    plan_levels,
    reference_forward,
    required_rotation_steps,
    save_weights,
    weights_digest,
)
from hcnn.packing import FORMAT_A, PackingFormat, TensorShape


def exhaustive_plan(costs, lives, max_level, target):
    """Try every refresh subset; return the best (count, live_sum, points).

    Written independently of the planner: straight simulation of the level
    chain for each candidate subset.
    """
    n = len(costs)
    entry0 = min(max_level, sum(costs))
    best = None
    for r in range(n + 1):
        for pts in itertools.combinations(range(n), r):
            lvl = entry0
            ok = True
            for i in range(n):
                if i in pts:
                    lvl = target
                if lvl < costs[i]:
                    ok = False
                    break
                lvl -= costs[i]
            if ok:
                cand = (r, sum(lives[i] for i in pts), pts)
                if best is None or cand < best:
                    best = cand
        if best is not None:
            # no smaller-count plan can appear in later iterations
            break
    return best


def mk_chain(costs, lives):
    """Synthetic linear graph with the given level costs and live counts."""
    kind_by_cost = {0: "avgpool", 1: "act", 2: "conv"}
    fmt = PackingFormat(FORMAT_A, 4, 1, 64)
    shape = TensorShape(1, 8, 8)
    n = len(costs)
    layers = [Layer(kind=kind_by_cost[c], name=f"l{i}")
              for i, c in enumerate(costs)]
    return HcnnGraph(
        topology="synthetic", layers=layers, input_shape=shape,
        input_format=fmt, multiplex=4, alternating=True,
        shapes=(shape,) * n, formats=(fmt,) * n,
        n_cts_entering=tuple(lives),
    )


@pytest.fixture(scope="module")
def gr_params():
    return CkksParams.build("graph-unit", 2048, 50, 40, 11, 50, 2)


@pytest.fixture(scope="module")
def tiny_fx(gr_params):
    return gen_fixture("tiny-cnn", 7, gr_params, golden_count=2)


@pytest.fixture(scope="module")
def tiny_graph(tiny_fx):
    return build_graph("tiny-cnn", tiny_fx, multiplex=4)


@pytest.fixture(scope="module")
def stack_fx(gr_params):
    return gen_fixture("basic-block-stack(2)", 11, gr_params)


@pytest.fixture(scope="module")
def stack_graph(stack_fx):
    return build_graph("basic-block-stack(2)", stack_fx, multiplex=4)


@pytest.fixture(scope="module")
def gr_keys(gr_params, tiny_graph, stack_graph):
    steps = required_rotation_steps(tiny_graph, gr_params.slots,
                                    include_fixed=True)
    steps |= required_rotation_steps(stack_graph, gr_params.slots)
    return ckks.keygen(gr_params, np.random.default_rng(0xD00D),
                       rotations=sorted(steps))


class TestBuildGraph:
    def test_tiny_cnn_structure(self, tiny_graph):
        assert [l.kind for l in tiny_graph.layers] == [
            "conv", "act", "conv", "act", "conv", "avgpool", "fc"]
        assert tiny_graph.level_costs() == (2, 1, 2, 1, 2, 0, 1)
        assert tiny_graph.total_level_cost() == 9

    def test_tiny_cnn_shape_chain(self, tiny_graph):
        chain = [(s.c, s.h, s.w) for s in tiny_graph.shapes]
        assert chain == [(1, 8, 8), (8, 8, 8), (8, 8, 8), (16, 8, 8),
                         (16, 8, 8), (16, 8, 8), (16, 1, 1)]
        assert tiny_graph.n_cts_entering == (1, 2, 2, 4, 4, 4, 4)

    def test_formats_alternate(self, tiny_graph):
        assert [f.variant for f in tiny_graph.formats] == [
            "A", "B", "B", "A", "A", "B", "B"]

    def test_fixed_baseline_all_a(self, tiny_graph):
        fixed = tiny_graph.fixed_baseline()
        assert all(f.variant == "A" for f in fixed.formats)
        assert fixed.level_costs() == tiny_graph.level_costs()

    def test_stack_structure(self, stack_fx):
        g = build_graph("basic-block-stack(2)", stack_fx, multiplex=4)
        assert [l.kind for l in g.layers] == [
            "conv", "act", "conv", "act", "resadd"] * 2
        assert sum(g.level_costs()[:5]) == 6
        assert g.total_level_cost() == 12
        assert [l.src for l in g.layers if l.kind == "resadd"] == [-1, 4]

    def test_stack_three_blocks(self):
        g = build_graph("basic-block-stack(3)")
        assert g.total_level_cost() == 18
        assert [l.src for l in g.layers if l.kind == "resadd"] == [-1, 4, 9]

    def test_fold_wiring(self, tiny_graph, stack_graph):
        acts = [l for l in tiny_graph.layers if l.kind == "act"]
        assert all(a.fold_forward for a in acts)
        s_acts = [l for l in stack_graph.layers if l.kind == "act"]
        assert [a.fold_forward for a in s_acts] == [True, False, True, False]
        # the conv feeding a self-contained activation emits reduced scale
        assert stack_graph.layers[2].spec.low_scale_out
        assert not stack_graph.layers[0].spec.low_scale_out

    def test_folded_conv_carries_pre_scale(self, tiny_graph):
        conv2 = tiny_graph.layers[2]
        assert conv2.spec.pre_scale is not None
        assert conv2.spec.bias_map is not None
        assert conv2.spec.bias is None

    def test_unknown_topology(self):
        with pytest.raises(GraphError):
            build_graph("resnet20")
        with pytest.raises(GraphError):
            build_graph("basic-block-stack(0)")
        with pytest.raises(GraphError):
            build_graph("basic-block-stack(x)")

    def test_weights_topology_mismatch(self, tiny_fx):
        bad = dict(tiny_fx, topology="basic-block-stack(1)")
        with pytest.raises(GraphError):
            build_graph("tiny-cnn", bad)
        with pytest.raises(GraphError):
            build_graph("basic-block-stack(1)", tiny_fx)

    def test_weights_shape_chain_error(self, tiny_fx):
        bad = copy.deepcopy(tiny_fx)
        w = np.zeros((8, 3, 3, 3))  # 3 in-channels cannot chain from 1
        bad["layers"][0]["weights"] = graph._b64(w)
        bad["layers"][0]["shape"] = [8, 3, 3, 3]
        with pytest.raises(GraphError):
            build_graph("tiny-cnn", bad)

    def test_weights_act_channel_mismatch(self, tiny_fx):
        bad = copy.deepcopy(tiny_fx)
        bad["layers"][1]["aespa"]["gamma"] = [1.0] * 4
        with pytest.raises(GraphError):
            build_graph("tiny-cnn", bad)

    def test_weights_layer_kind_mismatch(self, tiny_fx):
        bad = copy.deepcopy(tiny_fx)
        bad["layers"][1], bad["layers"][2] = bad["layers"][2], bad["layers"][1]
        with pytest.raises(GraphError):
            build_graph("tiny-cnn", bad)


class TestPlanner:
    def test_no_refresh_when_budget_suffices(self, tiny_graph):
        plan = plan_levels(tiny_graph, 10)
        assert plan.refresh_points == ()
        assert plan.entry_levels[0] == 9  # entry capped at the total cost
        assert plan.refresh_target_level == 9

    def test_one_over_budget_needs_one_refresh(self):
        g = mk_chain([1] * 11, [1] * 11)
        plan = plan_levels(g, 10)
        assert len(plan.refresh_points) == 1

    def test_entry_chain_consistency(self, stack_graph):
        plan = plan_levels(stack_graph, 11)
        lvl = plan.entry_levels[0]
        for i, layer in enumerate(stack_graph.layers):
            if i in plan.refresh_points:
                lvl = plan.refresh_target_level
            assert plan.entry_levels[i] == lvl
            assert lvl >= layer.level_cost
            lvl -= layer.level_cost
        assert lvl >= 0

    def test_basic_block_consumes_six_levels(self):
        g = build_graph("basic-block-stack(1)")
        plan = plan_levels(g, 11)
        assert plan.entry_levels == (6, 4, 3, 1, 0)
        assert plan.entry_levels[0] - (plan.entry_levels[-1]
                                       - g.layers[-1].level_cost) == 6

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(404)
        for _ in range(80):
            n = int(rng.integers(1, 13))
            costs = rng.integers(0, 3, size=n).tolist()
            lives = rng.integers(1, 5, size=n).tolist()
            max_level = int(rng.integers(2, 9))
            target = max_level - 1
            if max(costs) > target:
                continue
            plan = plan_levels(mk_chain(costs, lives), max_level)
            want = exhaustive_plan(costs, lives, max_level, target)
            got = (len(plan.refresh_points),
                   sum(lives[i] for i in plan.refresh_points),
                   plan.refresh_points)
            assert got == want, (costs, lives, max_level)

    @settings(max_examples=100, deadline=None)
    @given(
        costs=st.lists(st.sampled_from([0, 1, 2]), min_size=1, max_size=10),
        lives=st.lists(st.integers(1, 4), min_size=10, max_size=10),
        max_level=st.integers(2, 8),
    )
    def test_oracle_property(self, costs, lives, max_level):
        assume(max(costs) <= max_level - 1)
        lives = lives[:len(costs)]
        plan = plan_levels(mk_chain(costs, lives), max_level)
        want = exhaustive_plan(costs, lives, max_level, max_level - 1)
        assert len(plan.refresh_points) == want[0]
        assert sum(lives[i] for i in plan.refresh_points) == want[1]
        assert plan.refresh_points == want[2]

    def test_deterministic(self, stack_graph):
        plans = {plan_levels(stack_graph, 11) for _ in range(5)}
        assert len(plans) == 1

    def test_explicit_refresh_target(self):
        g = mk_chain([2, 2, 2], [1, 1, 1])
        plan = plan_levels(g, 6, refresh_target=3)
        assert plan.refresh_target_level == 3
        lvl = plan.entry_levels[0]
        for i in range(3):
            if i in plan.refresh_points:
                lvl = 3
            assert lvl >= 2
            lvl -= 2

    def test_infeasible_cost(self):
        g = mk_chain([2, 1], [1, 1])
        with pytest.raises(PlanError):
            plan_levels(g, 5, refresh_target=1)

    def test_target_above_max_level(self):
        g = mk_chain([1], [1])
        with pytest.raises(ParameterError):
            plan_levels(g, 5, refresh_target=6)

    def test_empty_graph(self):
        with pytest.raises(GraphError):
            plan_levels(mk_chain([], []), 5)


class TestWeightsBundle:
    def test_fixture_deterministic(self, gr_params):
        a = gen_fixture("tiny-cnn", 42, gr_params)
        b = gen_fixture("tiny-cnn", 42, gr_params)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
        assert weights_digest(a) == weights_digest(b)

    def test_fixture_seed_sensitivity(self, gr_params):
        a = gen_fixture("tiny-cnn", 1, gr_params)
        b = gen_fixture("tiny-cnn", 2, gr_params)
        assert weights_digest(a) != weights_digest(b)

    def test_save_load_roundtrip(self, tiny_fx, tmp_path):
        p = str(tmp_path / "w.json")
        save_weights(tiny_fx, p)
        back = load_weights(p)
        assert weights_digest(back) == weights_digest(tiny_fx)
        assert back["golden"] == tiny_fx["golden"]

    def test_digest_ignores_formatting(self, tiny_fx, tmp_path):
        p = str(tmp_path / "w.json")
        with open(p, "w") as f:
            json.dump(tiny_fx, f, indent=None, sort_keys=False)
        assert weights_digest(load_weights(p)) == weights_digest(tiny_fx)

    def test_digest_sees_every_weight(self, tiny_fx):
        bad = copy.deepcopy(tiny_fx)
        w = graph._load_array(bad["layers"][0], "weights")
        w[0, 0, 0, 0] += 1e-9
        bad["layers"][0]["weights"] = graph._b64(w)
        assert weights_digest(bad) != weights_digest(tiny_fx)

    def test_load_rejects_bad_version(self, tiny_fx, tmp_path):
        p = str(tmp_path / "w.json")
        save_weights(dict(tiny_fx, version=99), p)
        with pytest.raises(SerializationError):
            load_weights(p)

    def test_load_rejects_missing_fields(self, tmp_path):
        p = str(tmp_path / "w.json")
        with open(p, "w") as f:
            json.dump({"version": 1}, f)
        with pytest.raises(SerializationError):
            load_weights(p)

    def test_goldens_match_reference(self, tiny_fx):
        for g in tiny_fx["golden"]:
            got = reference_forward(tiny_fx, np.array(g["input"]))
            np.testing.assert_allclose(got, g["logits"], atol=1e-12)

    def test_params_digest_recorded(self, tiny_fx, gr_params):
        assert tiny_fx["params_digest"] == gr_params.digest()


class TestPlaintextExecutor:
    def test_tiny_matches_vanilla_forward(self, tiny_graph, tiny_fx):
        plan = plan_levels(tiny_graph, 11)
        for g in tiny_fx["golden"]:
            out, rep = execute(tiny_graph, plan, np.array(g["input"]),
                               mode="plaintext-ref")
            np.testing.assert_allclose(out, g["logits"], atol=1e-6)
            assert rep.mode == "plaintext-ref"

    def test_stack_matches_vanilla_forward(self, stack_graph, stack_fx):
        plan = plan_levels(stack_graph, 16, refresh_target=15)
        rng = np.random.default_rng(5)
        for _ in range(3):
            x = rng.uniform(-1, 1, (8, 8, 8))
            out, _ = execute(stack_graph, plan, x, mode="plaintext-ref")
            want = reference_forward(stack_fx, x)
            np.testing.assert_allclose(out, want, atol=1e-6)

    def test_zero_weights_leave_bias(self, gr_params):
        fx = _zeroed_fixture(gr_params)
        g = build_graph("tiny-cnn", fx, multiplex=4)
        plan = plan_levels(g, 11)
        out, _ = execute(g, plan, np.zeros((1, 8, 8)), mode="plaintext-ref")
        np.testing.assert_allclose(out, np.arange(10) * 0.1, atol=1e-12)

    def test_input_shape_checked(self, tiny_graph):
        plan = plan_levels(tiny_graph, 11)
        with pytest.raises(GraphError):
            execute(tiny_graph, plan, np.zeros((2, 8, 8)),
                    mode="plaintext-ref")


def _zeroed_fixture(params) -> dict:
    fx = gen_fixture("tiny-cnn", 3, params)
    for entry in fx["layers"]:
        if entry["kind"] in ("conv", "fc"):
            shape = entry["shape"]
            entry["weights"] = graph._b64(np.zeros(shape))
            entry["bias"] = graph._b64(
                np.arange(shape[0]) * 0.1 if entry["kind"] == "fc"
                else np.zeros(shape[0]))
    fx["golden"] = []
    return fx


@pytest.fixture(scope="module")
def tiny_run(tiny_graph, tiny_fx, gr_params, gr_keys):
    plan = plan_levels(tiny_graph, gr_params.max_level)
    rng = np.random.default_rng(77)
    x = np.array(tiny_fx["golden"][0]["input"])
    packed = packing.encrypt_tensor(x, tiny_graph.input_format, gr_keys,
                                    rng, plan.entry_levels[0])
    out, report = execute(tiny_graph, plan, packed, gr_keys, "encrypted")
    logits = packing.read_logits(out, 10, tiny_graph.formats[-1], gr_keys)
    return plan, out, report, logits


class TestEncryptedExecutor:
    def test_logits_match_golden(self, tiny_run, tiny_fx):
        _, _, _, logits = tiny_run
        want = np.array(tiny_fx["golden"][0]["logits"])
        assert np.abs(logits - want).max() < 1e-2

    def test_level_ledger(self, tiny_run):
        plan, out, report, _ = tiny_run
        assert [r["entry_level"] for r in report.per_layer] == \
            list(plan.entry_levels)
        assert out.level == plan.entry_levels[-1] - 1

    def test_report_shape(self, tiny_run, tiny_graph):
        _, _, report, _ = tiny_run
        d = report.as_dict()
        assert d["version"] == 1
        assert d["insecure"] is True  # desk parameters carry no security
        assert len(d["per_layer"]) == len(tiny_graph.layers)
        assert d["totals"]["rotations"] == sum(
            r["tally"]["rotations"] for r in d["per_layer"])
        assert any("not comparable" in n for n in d["notes"])

    def test_tally_deterministic(self, tiny_graph, tiny_fx, gr_params,
                                 gr_keys, tiny_run):
        plan, _, report, _ = tiny_run
        rng = np.random.default_rng(78)
        x = np.array(tiny_fx["golden"][0]["input"])
        packed = packing.encrypt_tensor(x, tiny_graph.input_format, gr_keys,
                                        rng, plan.entry_levels[0])
        _, again = execute(tiny_graph, plan, packed, gr_keys, "encrypted")
        assert again.totals().as_dict() == report.totals().as_dict()

    def test_wrong_input_level(self, tiny_graph, gr_keys, gr_params):
        plan = plan_levels(tiny_graph, gr_params.max_level)
        packed = packing.encrypt_tensor(
            np.zeros((1, 8, 8)), tiny_graph.input_format, gr_keys,
            np.random.default_rng(1), plan.entry_levels[0] + 1)
        with pytest.raises(GraphError):
            execute(tiny_graph, plan, packed, gr_keys, "encrypted")

    def test_plan_graph_mismatch(self, tiny_graph, stack_graph, gr_keys):
        plan = plan_levels(stack_graph, 11)
        with pytest.raises(GraphError):
            execute(tiny_graph, plan, np.zeros((1, 8, 8)),
                    mode="plaintext-ref")

    def test_unknown_mode(self, tiny_graph, gr_keys):
        plan = plan_levels(tiny_graph, 11)
        with pytest.raises(ParameterError):
            execute(tiny_graph, plan, np.zeros((1, 8, 8)), gr_keys, "hybrid")

    def test_encrypted_needs_keys(self, tiny_graph):
        plan = plan_levels(tiny_graph, 11)
        with pytest.raises(ParameterError):
            execute(tiny_graph, plan, np.zeros((1, 8, 8)), None, "encrypted")

    def test_zero_weights_encrypted(self, gr_params, gr_keys):
        fx = _zeroed_fixture(gr_params)
        g = build_graph("tiny-cnn", fx, multiplex=4)
        plan = plan_levels(g, gr_params.max_level)
        packed = packing.encrypt_tensor(
            np.zeros((1, 8, 8)), g.input_format, gr_keys,
            np.random.default_rng(2), plan.entry_levels[0])
        out, _ = execute(g, plan, packed, gr_keys, "encrypted")
        logits = packing.read_logits(out, 10, g.formats[-1], gr_keys)
        assert np.abs(logits - np.arange(10) * 0.1).max() < 1e-3


class TestRefresh:
    def test_stack_over_budget_refreshes(self, stack_graph, stack_fx,
                                         gr_params, gr_keys):
        plan = plan_levels(stack_graph, gr_params.max_level)
        assert len(plan.refresh_points) == 1
        rng = np.random.default_rng(31)
        x = rng.uniform(-1, 1, (8, 8, 8))
        packed = packing.encrypt_tensor(x, stack_graph.input_format, gr_keys,
                                        rng, plan.entry_levels[0])
        out, report = execute(stack_graph, plan, packed, gr_keys, "encrypted")
        want, _ = execute(stack_graph, plan, x, mode="plaintext-ref")
        got = packing.decrypt_tensor(out, gr_keys)
        assert np.abs(got - want).max() < 1e-2
        assert report.totals().refreshes == 2  # one event, two ciphertexts
        assert report.insecure

    def test_live_levels_follow_plan(self, stack_graph, gr_params, gr_keys):
        plan = plan_levels(stack_graph, gr_params.max_level)
        rng = np.random.default_rng(32)
        packed = packing.encrypt_tensor(
            np.zeros((8, 8, 8)), stack_graph.input_format, gr_keys, rng,
            plan.entry_levels[0])
        _, report = execute(stack_graph, plan, packed, gr_keys, "encrypted")
        assert [r["entry_level"] for r in report.per_layer] == \
            list(plan.entry_levels)


@pytest.fixture(scope="module")
def compare(tiny_graph, tiny_fx, gr_params, gr_keys):
    plan = plan_levels(tiny_graph, gr_params.max_level)
    x = np.array(tiny_fx["golden"][0]["input"])
    return cost_report_compare(tiny_graph, plan, x, gr_keys,
                               np.random.default_rng(9))


class TestCostCompare:
    def test_alternating_strictly_cheaper(self, compare):
        assert len(compare["per_conv"]) == 3
        for row in compare["per_conv"]:
            assert max(row["in_channels"], row["out_channels"]) >= 8
            assert row["rotations_fixed"] > row["rotations_alternating"]
            assert row["ratio"] > 1

    def test_paths_agree(self, compare):
        assert compare["max_abs_diff"] < 1e-3

    def test_totals_consistent(self, compare):
        assert compare["total_rotations_alternating"] == sum(
            r["rotations_alternating"] for r in compare["per_conv"])
        assert compare["total_rotations_fixed"] == sum(
            r["rotations_fixed"] for r in compare["per_conv"])
        assert compare["ratio_total"] > 1

    def test_requires_alternating_graph(self, tiny_graph, gr_keys):
        fixed = tiny_graph.fixed_baseline()
        plan = plan_levels(fixed, 11)
        with pytest.raises(GraphError):
            cost_report_compare(fixed, plan, np.zeros((1, 8, 8)), gr_keys,
                                np.random.default_rng(1))


class TestRotationSteps:
    def test_steps_cover_execution(self, tiny_graph, gr_params):
        steps = required_rotation_steps(tiny_graph, gr_params.slots)
        assert steps
        assert all(0 < s < gr_params.slots for s in steps)

    def test_fixed_needs_more_steps(self, tiny_graph, gr_params):
        alt = required_rotation_steps(tiny_graph, gr_params.slots)
        both = required_rotation_steps(tiny_graph, gr_params.slots,
                                       include_fixed=True)
        assert alt < both
