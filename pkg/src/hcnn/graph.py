"""Network graphs, level planning, and the two executors.

A graph is an ordered layer list with a fixed level ledger: convolution 2,
activation 1, downsample 1, global average pool 0, dense head 1, residual
add 0. The planner inserts refresh points so the running level never drops
below a layer's cost, minimizing refresh count first, then the number of
live ciphertexts at the chosen points, then preferring earlier positions.

Two executors share the graph: the encrypted one drives the packed layer
evaluators, the plaintext reference mirrors the same folded arithmetic on
bare arrays. A third, deliberately separate path (reference_forward)
computes the vanilla network from the weights file alone and is what test
goldens are checked against.

Quadratic activations fold into their consuming convolution (the x^2
coefficient becomes the conv's input pre-scale, the constant term its
bias map) whenever the activation output feeds exactly that convolution.
An activation whose output is forked by a residual skip, or that ends the
graph, evaluates self-contained inside its single level instead.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ckks, packing
from .io import _atomic_write
from .aespa import (
    AespaChannelParams,
    QuadActivation,
    aespa_eval_plain,
    fold_channels,
    hermite_coeffs,
)
from .ckks import Ciphertext, CkksParams, KeySet, mask_scale_for
from .errors import GraphError, ParameterError, PlanError, SerializationError
from .packing import (
    ConvLayerSpec,
    FORMAT_A,
    FORMAT_B,
    OpTally,
    PackedTensor,
    PackingFormat,
    TensorShape,
    conv_rotation_steps,
    pool_fc_rotation_steps,
)

WEIGHTS_VERSION = 1
REPORT_VERSION = 1
LEVEL_COSTS = {"conv": 2, "act": 1, "downsample": 1, "avgpool": 0,
               "fc": 1, "resadd": 0}
TIMING_NOTE = "desk-scale single-thread CPU medians; not comparable to published GPU figures"


# ---------------------------------------------------------------------------
# graph structure
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    kind: str
    name: str
    spec: ConvLayerSpec | None = None          # conv
    channels: list[AespaChannelParams] | None = None   # act
    quads: list[QuadActivation] | None = None
    fold_forward: bool = True
    fc_weight: np.ndarray | None = None        # fc
    fc_bias: np.ndarray | None = None
    src: int | None = None                     # resadd skip source (-1: input)

    @property
    def level_cost(self) -> int:
        return LEVEL_COSTS[self.kind]


@dataclass
class HcnnGraph:
    topology: str
    layers: list[Layer]
    input_shape: TensorShape
    input_format: PackingFormat
    multiplex: int
    alternating: bool
    shapes: tuple[TensorShape, ...]            # tensor entering each layer
    formats: tuple[PackingFormat, ...]         # format entering each layer
    n_cts_entering: tuple[int, ...]
    weights_obj: dict | None = None
    n_classes: int | None = None

    def level_costs(self) -> tuple[int, ...]:
        return tuple(layer.level_cost for layer in self.layers)

    def total_level_cost(self) -> int:
        return sum(self.level_costs())

    def fixed_baseline(self) -> "HcnnGraph":
        return build_graph(self.topology, self.weights_obj,
                           alternating=False, multiplex=self.multiplex)


@dataclass(frozen=True)
class LevelPlan:
    entry_levels: tuple[int, ...]
    refresh_points: tuple[int, ...]
    refresh_target_level: int

    def as_dict(self) -> dict:
        return {
            "entry_levels": list(self.entry_levels),
            "refresh_points": list(self.refresh_points),
            "refresh_target_level": self.refresh_target_level,
        }


def _parse_topology(name: str) -> tuple[str, int | None]:
    if name == "tiny-cnn":
        return "tiny-cnn", None
    if name.startswith("basic-block-stack(") and name.endswith(")"):
        inner = name[len("basic-block-stack("):-1]
        try:
            n = int(inner)
        except ValueError:
            raise GraphError(f"unsupported topology {name!r}")
        if n < 1:
            raise GraphError("basic-block-stack needs at least one block")
        return "basic-block-stack", n
    raise GraphError(f"unsupported topology {name!r}")


def _topology_skeleton(name: str) -> tuple[list[dict], TensorShape, int | None]:
    """Layer kinds, channel chain, and head width for a topology."""
    base, n = _parse_topology(name)
    if base == "tiny-cnn":
        kinds = [
            {"kind": "conv", "out_c": 8},
            {"kind": "act"},
            {"kind": "conv", "out_c": 16},
            {"kind": "act"},
            {"kind": "conv", "out_c": 16},
            {"kind": "avgpool"},
            {"kind": "fc", "out": 10},
        ]
        return kinds, TensorShape(1, 8, 8), 10
    kinds = []
    for b in range(n):
        prev_out = len(kinds) - 1 if b else -1
        kinds.append({"kind": "conv", "out_c": 8})
        kinds.append({"kind": "act"})
        kinds.append({"kind": "conv", "out_c": 8})
        kinds.append({"kind": "act"})
        kinds.append({"kind": "resadd", "src": prev_out})
    return kinds, TensorShape(8, 8, 8), None


def _layer_names(kinds: list[dict]) -> list[str]:
    counts: dict[str, int] = {}
    names = []
    for k in kinds:
        counts[k["kind"]] = counts.get(k["kind"], 0) + 1
        names.append(f"{k['kind']}{counts[k['kind']]}")
    return names


def build_graph(topology: str, weights: dict | None = None, *,
                alternating: bool = True, multiplex: int = 8) -> HcnnGraph:
    """Assemble a supported topology, optionally binding a weights bundle."""
    kinds, in_shape, n_classes = _topology_skeleton(topology)
    names = _layer_names(kinds)
    span = in_shape.h * in_shape.w
    fmt_a = PackingFormat(FORMAT_A, multiplex, 1, span)
    fmt_b = PackingFormat(FORMAT_B, multiplex, 1, span)

    wl = None
    if weights is not None:
        if weights.get("topology") != topology:
            raise GraphError(
                f"weights are for {weights.get('topology')!r}, not {topology!r}"
            )
        wl = weights["layers"]
        if len(wl) != len(kinds):
            raise GraphError(
                f"{topology} has {len(kinds)} layers, weights carry {len(wl)}"
            )

    basis = hermite_coeffs(2)
    layers: list[Layer] = []
    shapes: list[TensorShape] = []
    formats: list[PackingFormat] = []
    shape = in_shape
    fmt = fmt_a
    next_variant = FORMAT_B
    for i, kd in enumerate(kinds):
        kind = kd["kind"]
        if wl is not None and wl[i].get("kind") != kind:
            raise GraphError(
                f"layer {i} is {kind!r} in the topology, "
                f"{wl[i].get('kind')!r} in the weights"
            )
        shapes.append(shape)
        formats.append(fmt)
        layer = Layer(kind=kind, name=names[i])
        if kind == "conv":
            out_c = kd["out_c"]
            if alternating:
                out_fmt = PackingFormat(next_variant, multiplex, fmt.gap, span)
                next_variant = FORMAT_A if next_variant == FORMAT_B else FORMAT_B
            else:
                out_fmt = fmt
            if wl is not None:
                w = _load_array(wl[i], "weights")
                b = _load_array(wl[i], "bias") if wl[i].get("bias") is not None else None
                if w.shape[1] != shape.c or w.shape[0] != out_c:
                    raise GraphError(
                        f"{names[i]}: weights {w.shape} do not chain from "
                        f"{shape.c} to {out_c} channels"
                    )
                layer.spec = ConvLayerSpec(w, int(wl[i].get("stride", 1)),
                                           fmt, out_fmt, bias=b)
            else:
                layer.spec = ConvLayerSpec(
                    np.zeros((out_c, shape.c, 3, 3)), 1, fmt, out_fmt)
            shape = TensorShape(out_c, shape.h // layer.spec.stride,
                                shape.w // layer.spec.stride)
            fmt = out_fmt
        elif kind == "act":
            if wl is not None:
                layer.channels = _load_aespa(wl[i], shape.c, names[i])
                layer.quads = fold_channels(layer.channels, basis)
        elif kind == "downsample":
            shape = TensorShape(shape.c, shape.h // 2, shape.w // 2)
            fmt = fmt.downsampled()
        elif kind == "avgpool":
            shape = TensorShape(shape.c, 1, 1)
        elif kind == "fc":
            if wl is not None:
                w = _load_array(wl[i], "weights")
                if w.shape != (kd["out"], shape.c):
                    raise GraphError(
                        f"{names[i]}: weights {w.shape} do not match "
                        f"({kd['out']}, {shape.c})"
                    )
                layer.fc_weight = w
                layer.fc_bias = (_load_array(wl[i], "bias")
                                 if wl[i].get("bias") is not None else None)
            shape = TensorShape(kd["out"], 1, 1)
        elif kind == "resadd":
            layer.src = kd["src"]
        layers.append(layer)

    _wire_folds(layers, shapes)
    n_cts = tuple(-(-s.c // multiplex) for s in shapes)
    return HcnnGraph(
        topology=topology, layers=layers, input_shape=in_shape,
        input_format=fmt_a, multiplex=multiplex, alternating=alternating,
        shapes=tuple(shapes), formats=tuple(formats), n_cts_entering=n_cts,
        weights_obj=weights, n_classes=n_classes,
    )


def _wire_folds(layers: list[Layer], shapes: list[TensorShape]):
    """Decide per activation whether it folds into the next convolution.

    A self-contained activation needs its producing convolution to emit a
    reduced scale (see ConvLayerSpec.low_scale_out), so that conv is
    flagged here as well.
    """
    forked = {layer.src for layer in layers if layer.kind == "resadd"}
    for i, layer in enumerate(layers):
        if layer.kind != "act":
            continue
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        layer.fold_forward = (nxt is not None and nxt.kind == "conv"
                              and i not in forked)
        if not layer.fold_forward or layer.quads is None:
            continue
        spec = nxt.spec
        pre = np.array([q.a for q in layer.quads])
        consts = np.array([q.c for q in layer.quads])
        const_img = np.broadcast_to(
            consts[:, None, None], (shapes[i].c, shapes[i].h, shapes[i].w))
        bias_map = _plain_conv(const_img, spec.weights, spec.stride)
        if spec.bias is not None:
            bias_map = bias_map + np.asarray(spec.bias)[:, None, None]
        nxt.spec = replace(
            spec, bias=None, pre_scale=pre,
            bias_map=np.ascontiguousarray(bias_map),
        )
    for i, layer in enumerate(layers):
        if layer.kind != "act" or layer.fold_forward:
            continue
        prev = layers[i - 1] if i else None
        if prev is None or prev.kind != "conv":
            raise GraphError(
                f"{layer.name}: an unfused activation must follow a convolution")
        prev.spec = replace(prev.spec, low_scale_out=True)


# ---------------------------------------------------------------------------
# level planning
# ---------------------------------------------------------------------------

def plan_levels(graph: HcnnGraph, max_level: int,
                refresh_target: int | None = None) -> LevelPlan:
    """Choose refresh points so no layer enters below its cost.

    Minimal refresh count wins; among minimal plans the one with the
    smallest total live-ciphertext count at its refresh points, then the
    lexicographically earliest point set.
    """
    costs = graph.level_costs()
    lives = graph.n_cts_entering
    n = len(costs)
    target = max_level - 1 if refresh_target is None else refresh_target
    if target > max_level:
        raise ParameterError(
            f"refresh target {target} exceeds max level {max_level}")
    if n == 0:
        raise GraphError("empty graph")
    if max(costs) > target:
        raise PlanError(
            f"layer cost {max(costs)} exceeds refresh target {target}")

    entry0 = min(max_level, sum(costs))

    memo: dict[tuple[int, int], tuple] = {}

    def best(i: int, lvl: int) -> tuple:
        """(count, live_sum, points) continuing from layer i at lvl."""
        if i == n:
            return (0, 0, ())
        key = (i, lvl)
        if key in memo:
            return memo[key]
        cands = []
        if lvl >= costs[i]:
            c, s, pts = best(i + 1, lvl - costs[i])
            cands.append((c, s, pts))
        c, s, pts = best(i + 1, target - costs[i])
        cands.append((c + 1, s + lives[i], (i,) + pts))
        res = min(cands)
        memo[key] = res
        return res

    _, _, points = best(0, entry0)
    entries = []
    lvl = entry0
    for i in range(n):
        if i in points:
            lvl = target
        entries.append(lvl)
        lvl -= costs[i]
    return LevelPlan(tuple(entries), tuple(points), target)


def _check_plan(graph: HcnnGraph, plan: LevelPlan):
    if len(plan.entry_levels) != len(graph.layers):
        raise GraphError("plan does not match graph: length mismatch")
    for entry, layer in zip(plan.entry_levels, graph.layers):
        if entry < layer.level_cost:
            raise GraphError(
                f"plan enters {layer.name} at {entry}, below its cost")


# ---------------------------------------------------------------------------
# cost reporting
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    mode: str
    per_layer: list[dict] = field(default_factory=list)
    insecure: bool = False
    notes: list[str] = field(default_factory=list)

    def add(self, name: str, kind: str, tally: OpTally, ms: float,
            entry_level: int | None):
        self.per_layer.append({
            "name": name, "kind": kind, "tally": tally.as_dict(),
            "ms": round(ms, 3), "entry_level": entry_level,
        })

    def totals(self) -> OpTally:
        t = OpTally()
        for row in self.per_layer:
            t += OpTally(**row["tally"])
        return t

    def as_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "mode": self.mode,
            "per_layer": self.per_layer,
            "totals": self.totals().as_dict(),
            "total_ms": round(sum(r["ms"] for r in self.per_layer), 3),
            "insecure": self.insecure,
            "notes": self.notes,
        }


# ---------------------------------------------------------------------------
# executors
# ---------------------------------------------------------------------------

def _plain_conv(t: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Tap-shift convolution with zero padding (plaintext mirror)."""
    oc, ic, kh, kw = w.shape
    c, h, wd = t.shape
    out = np.zeros((oc, h, wd))
    for dy in range(-(kh // 2), kh // 2 + 1):
        for dx in range(-(kw // 2), kw // 2 + 1):
            shifted = np.zeros_like(t)
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(wd, wd - dx))
            ys_src = slice(max(0, dy), min(h, h + dy))
            xs_src = slice(max(0, dx), min(wd, wd + dx))
            shifted[:, ys, xs] = t[:, ys_src, xs_src]
            out += np.einsum("oi,ihw->ohw", w[:, :, dy + kh // 2, dx + kw // 2],
                             shifted)
    if stride == 2:
        out = out[:, ::2, ::2]
    return np.ascontiguousarray(out)


def _cached_encode(values: np.ndarray, params: CkksParams, level: int,
                   scale: float, cache: dict | None, key):
    if cache is not None and key in cache:
        return cache[key]
    pt = ckks.encode(values, params, level, scale)
    if cache is not None:
        cache[key] = pt
    return pt


def _act_self_contained(x: PackedTensor, quads, ks: KeySet,
                        tally: OpTally | None, cache: dict | None,
                        tag: str) -> PackedTensor:
    """Full a*x^2 + b*x + c inside one level (no fold target available)."""
    params = ks.params
    lay = packing.Layout(x.fmt, x.shape, params.slots)
    a_vals = np.array([q.a for q in quads])
    b_vals = np.array([q.b for q in quads])
    c_vals = np.array([q.c for q in quads])
    out_cts = []
    for i, ct in enumerate(x.cts):
        ms = mask_scale_for(params, ct.level, ct.scale * ct.scale)
        key = (tag, "a", i, ct.level, ct.scale)
        amask = packing._mask_pt(lay.channel_values(i, a_vals), params,
                                 ct.level, ms, cache, key)
        if amask is not None:
            t = ckks.pmult_mont(ct, amask[0], amask[1])
            bpt = _cached_encode(lay.channel_values(i, b_vals), params,
                                 ct.level, t.scale, cache,
                                 (tag, "b", i, ct.level, t.scale))
            t = ckks.padd(t, bpt)
            out = ckks.rescale(ckks.hmult(ct, t, ks), params)
            if tally:
                tally.pmults += 1
                tally.hadds += 1
                tally.hmults += 1
                tally.rescales += 1
        else:
            # degenerate all-zero quadratic coefficient: purely linear
            ms = mask_scale_for(params, ct.level, ct.scale)
            bmask = packing._mask_pt(lay.channel_values(i, b_vals), params,
                                     ct.level, ms, cache,
                                     (tag, "blin", i, ct.level, ct.scale))
            if bmask is not None:
                out = ckks.rescale(ckks.pmult_mont(ct, bmask[0], bmask[1]),
                                   params)
                if tally:
                    tally.pmults += 1
                    tally.rescales += 1
            else:
                out = packing._zero_ct(params, ct.level - 1,
                                       params.delta, ct.n)
        cpt = _cached_encode(lay.channel_values(i, c_vals), params,
                             out.level, out.scale, cache,
                             (tag, "c", i, out.level, out.scale))
        out = ckks.padd(out, cpt)
        if tally:
            tally.hadds += 1
        out_cts.append(out)
    return PackedTensor(cts=out_cts, fmt=x.fmt, shape=x.shape)


def _refresh_tensor(x: PackedTensor, ks: KeySet, target: int,
                    tally: OpTally) -> PackedTensor:
    cts = [ckks.debug_refresh(ct, ks, target_level=target) for ct in x.cts]
    tally.refreshes += len(cts)
    return PackedTensor(cts=cts, fmt=x.fmt, shape=x.shape)


def execute(graph: HcnnGraph, plan: LevelPlan, x, ks: KeySet | None = None,
            mode: str = "encrypted", cache: dict | None = None):
    """Run the graph; returns (output, CostReport).

    Encrypted mode takes a PackedTensor and returns the final Ciphertext
    (dense head) or PackedTensor, still encrypted. plaintext-ref mode
    takes a bare array and mirrors the folded arithmetic exactly.
    """
    _check_plan(graph, plan)
    if mode == "plaintext-ref":
        return _execute_plain(graph, plan, x)
    if mode != "encrypted":
        raise ParameterError(f"unknown mode {mode!r}")
    if ks is None:
        raise ParameterError("encrypted mode needs a keyset")
    if not isinstance(x, PackedTensor):
        raise GraphError("encrypted mode expects a packed input")
    if x.level != plan.entry_levels[0] and 0 not in plan.refresh_points:
        raise GraphError(
            f"input at level {x.level}, plan expects {plan.entry_levels[0]}")

    report = CostReport(mode="encrypted", insecure=ks.params.toy)
    report.notes.append(TIMING_NOTE)
    cache = {} if cache is None else cache
    needed_srcs = {layer.src for layer in graph.layers
                   if layer.kind == "resadd" and layer.src is not None
                   and layer.src >= 0}
    snapshots: dict[int, PackedTensor] = {}
    cur: PackedTensor | Ciphertext = x
    for i, layer in enumerate(graph.layers):
        tally = OpTally()
        t0 = time.perf_counter()
        if i in plan.refresh_points:
            cur = _refresh_tensor(cur, ks, plan.refresh_target_level, tally)
            for s in list(snapshots):
                snapshots[s] = _refresh_tensor(
                    snapshots[s], ks, plan.refresh_target_level, tally)
            report.insecure = True
        entry = cur.level
        if entry != plan.entry_levels[i]:
            raise GraphError(
                f"{layer.name} entered at level {entry}, "
                f"plan says {plan.entry_levels[i]}")
        if layer.kind == "conv":
            fn = packing.conv2d if graph.alternating else packing.conv2d_fixed_baseline
            cur = fn(cur, layer.spec, ks, tally, cache, tag=layer.name)
        elif layer.kind == "act":
            if layer.quads is None:
                raise GraphError(f"{layer.name} has no bound parameters")
            if layer.fold_forward:
                cur = packing.he_activation(cur, layer.quads, ks, tally,
                                            cache, tag=layer.name)
            else:
                cur = _act_self_contained(cur, layer.quads, ks, tally,
                                          cache, tag=layer.name)
        elif layer.kind == "downsample":
            cur = packing.downsample(cur, ks, tally, cache, tag=layer.name)
        elif layer.kind == "avgpool":
            cur = packing.avgpool_global(cur, ks, tally, cache, tag=layer.name)
        elif layer.kind == "fc":
            if layer.fc_weight is None:
                raise GraphError(f"{layer.name} has no bound parameters")
            cur = packing.fully_connected(cur, layer.fc_weight, layer.fc_bias,
                                          ks, tally, cache, tag=layer.name)
        elif layer.kind == "resadd":
            skip = x if layer.src == -1 else snapshots[layer.src]
            if skip.fmt != cur.fmt or skip.shape != cur.shape:
                raise GraphError(f"{layer.name}: branch layout mismatch")
            out_cts = []
            for main_ct, skip_ct in zip(cur.cts, skip.cts):
                dropped = ckks.mod_drop(skip_ct, main_ct.level)
                tally.hadds += 1
                out_cts.append(ckks.hadd(main_ct, dropped))
            cur = PackedTensor(cts=out_cts, fmt=cur.fmt, shape=cur.shape)
        else:
            raise GraphError(f"unknown layer kind {layer.kind!r}")
        if i in needed_srcs:
            snapshots[i] = cur
        report.add(layer.name, layer.kind, tally,
                   (time.perf_counter() - t0) * 1e3, plan.entry_levels[i])
    if report.totals().refreshes:
        report.insecure = True
    return cur, report


def _execute_plain(graph: HcnnGraph, plan: LevelPlan, x):
    t = np.asarray(x, dtype=np.float64)
    if t.shape != (graph.input_shape.c, graph.input_shape.h, graph.input_shape.w):
        raise GraphError(f"input shape {t.shape} does not match graph")
    report = CostReport(mode="plaintext-ref")
    report.notes.append("plaintext reference path; no homomorphic ops")
    snapshots: dict[int, np.ndarray] = {}
    needed = {layer.src for layer in graph.layers
              if layer.kind == "resadd" and layer.src is not None
              and layer.src >= 0}
    x0 = t
    for i, layer in enumerate(graph.layers):
        t0 = time.perf_counter()
        if layer.kind == "conv":
            spec = layer.spec
            out = _plain_conv(t, spec.effective_weights(), spec.stride)
            if spec.bias_map is not None:
                out = out + spec.bias_map
            elif spec.bias is not None:
                out = out + np.asarray(spec.bias)[:, None, None]
            t = out
        elif layer.kind == "act":
            if layer.quads is None:
                raise GraphError(f"{layer.name} has no bound parameters")
            cols = []
            for c, q in enumerate(layer.quads):
                if layer.fold_forward:
                    cols.append(t[c] ** 2 + q.mask_value * t[c])
                else:
                    cols.append(q.a * t[c] ** 2 + q.b * t[c] + q.c)
            t = np.stack(cols)
        elif layer.kind == "downsample":
            t = t[:, ::2, ::2]
        elif layer.kind == "avgpool":
            t = t.mean(axis=(1, 2))[:, None, None]
        elif layer.kind == "fc":
            if layer.fc_weight is None:
                raise GraphError(f"{layer.name} has no bound parameters")
            v = layer.fc_weight @ t[:, 0, 0]
            if layer.fc_bias is not None:
                v = v + layer.fc_bias
            t = v
        elif layer.kind == "resadd":
            skip = x0 if layer.src == -1 else snapshots[layer.src]
            t = t + skip
        if i in needed:
            snapshots[i] = t
        report.add(layer.name, layer.kind, OpTally(),
                   (time.perf_counter() - t0) * 1e3, plan.entry_levels[i])
    return t, report


def cost_report_compare(graph: HcnnGraph, plan: LevelPlan, x: np.ndarray,
                        ks: KeySet, rng: np.random.Generator) -> dict:
    """Run the alternating and fixed-layout paths, tabulate rotations.

    Returns per-conv rotation counts, the fixed/alternating ratio, and the
    max abs difference between the two decrypted outputs.
    """
    if not graph.alternating:
        raise GraphError("pass the alternating graph; the baseline is derived")
    fixed = graph.fixed_baseline()
    out_rows = []
    packed = packing.encrypt_tensor(np.asarray(x), graph.input_format, ks,
                                    rng, plan.entry_levels[0])
    alt_out, alt_rep = execute(graph, plan, packed, ks, "encrypted")
    fix_out, fix_rep = execute(fixed, plan, packed, ks, "encrypted")
    for row_a, row_f, layer in zip(alt_rep.per_layer, fix_rep.per_layer,
                                   graph.layers):
        if layer.kind != "conv":
            continue
        ra = row_a["tally"]["rotations"]
        rf = row_f["tally"]["rotations"]
        out_rows.append({
            "layer": row_a["name"],
            "in_channels": layer.spec.in_c,
            "out_channels": layer.spec.out_c,
            "rotations_alternating": ra,
            "rotations_fixed": rf,
            "ratio": round(rf / ra, 3) if ra else None,
        })
    if isinstance(alt_out, Ciphertext):
        va = packing.read_logits(alt_out, graph.n_classes, graph.formats[-1], ks)
        vf = packing.read_logits(fix_out, graph.n_classes, fixed.formats[-1], ks)
    else:
        va = packing.decrypt_tensor(alt_out, ks).ravel()
        vf = packing.decrypt_tensor(fix_out, ks).ravel()
    tot_a = sum(r["rotations_alternating"] for r in out_rows)
    tot_f = sum(r["rotations_fixed"] for r in out_rows)
    return {
        "version": REPORT_VERSION,
        "per_conv": out_rows,
        "total_rotations_alternating": tot_a,
        "total_rotations_fixed": tot_f,
        "ratio_total": round(tot_f / tot_a, 3) if tot_a else None,
        "max_abs_diff": float(np.abs(va - vf).max()),
        "insecure": alt_rep.insecure or fix_rep.insecure,
    }


def required_rotation_steps(graph: HcnnGraph, n_slots: int,
                            include_fixed: bool = False) -> set[int]:
    """Every rotation step the executor will ask of the keyset."""
    steps: set[int] = set()
    fc_out = None
    pool_at: tuple[TensorShape, PackingFormat] | None = None
    for i, layer in enumerate(graph.layers):
        if layer.kind == "conv":
            steps |= conv_rotation_steps(layer.spec, graph.shapes[i], n_slots)
            if include_fixed:
                fixed_spec = ConvLayerSpec(
                    layer.spec.weights, layer.spec.stride,
                    graph.formats[i], graph.formats[i])
                steps |= conv_rotation_steps(fixed_spec, graph.shapes[i],
                                             n_slots, fixed=True)
        elif layer.kind == "avgpool":
            pool_at = (graph.shapes[i], graph.formats[i])
        elif layer.kind == "fc":
            fc_out = layer.fc_weight.shape[0] if layer.fc_weight is not None else 10
    if pool_at is not None and fc_out is not None:
        shape, fmt = pool_at
        steps |= pool_fc_rotation_steps(shape, fmt, n_slots, shape.c, fc_out)
        if include_fixed:
            fixed_fmt = PackingFormat(FORMAT_A, fmt.multiplex, fmt.gap, fmt.span)
            steps |= pool_fc_rotation_steps(shape, fixed_fmt, n_slots,
                                            shape.c, fc_out)
    return steps


# ---------------------------------------------------------------------------
# weights bundle: JSON schema, digest, fixture generation
# ---------------------------------------------------------------------------

def _b64(a: np.ndarray) -> str:
    return base64.b64encode(
        np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _load_array(entry: dict, field_name: str) -> np.ndarray:
    raw = entry[field_name]
    if isinstance(raw, str):
        data = np.frombuffer(base64.b64decode(raw), dtype="<f8")
        shape = entry.get("shape")
        if field_name == "weights" and shape:
            data = data.reshape(shape)
        return np.array(data, dtype=np.float64)
    return np.asarray(raw, dtype=np.float64)


def _load_aespa(entry: dict, n_channels: int, name: str):
    blk = entry.get("aespa")
    if blk is None:
        raise GraphError(f"{name}: missing activation parameters")
    gamma = np.asarray(blk["gamma"], dtype=np.float64)
    beta = np.asarray(blk["beta"], dtype=np.float64)
    mu = np.asarray(blk["mu"], dtype=np.float64)
    sigma2 = np.asarray(blk["sigma2"], dtype=np.float64)
    eps = float(blk.get("eps", 1e-5))
    if gamma.shape[0] != n_channels:
        raise GraphError(
            f"{name}: {gamma.shape[0]} activation channels for "
            f"{n_channels} tensor channels")
    return [
        AespaChannelParams(float(gamma[c]), float(beta[c]),
                           tuple(mu[c]), tuple(sigma2[c]), eps)
        for c in range(n_channels)
    ]


_DIGEST_FIELDS = {
    "conv": ("bias", "shape", "stride", "weights"),
    "act": ("beta", "eps", "gamma", "mu", "sigma2"),
    "fc": ("bias", "shape", "weights"),
    "avgpool": (),
    "downsample": (),
    "resadd": (),
}


def weights_digest(obj: dict) -> str:
    """Canonical digest over layer contents, independent of JSON formatting.

    Per layer, in order: the kind, then each numeric field sorted by name
    as raw little-endian float64 bytes. Goldens and metadata are excluded
    so any producer emitting the same numbers yields the same digest.
    """
    h = hashlib.sha256()
    h.update(f"hcnn-weights-v{WEIGHTS_VERSION};{obj['topology']};".encode())
    for entry in obj["layers"]:
        kind = entry["kind"]
        h.update(kind.encode() + b";")
        src = dict(entry)
        if "aespa" in src:
            src.update(src.pop("aespa"))
        for name in _DIGEST_FIELDS[kind]:
            if name not in src or src[name] is None:
                continue
            if name in ("weights", "bias"):
                a = _load_array(entry, name)
            else:
                a = np.asarray(src[name], dtype=np.float64)
            h.update(name.encode() + b":")
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
            h.update(b";")
    return h.hexdigest()


def save_weights(obj: dict, path: str):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic_write(path, lambda f: f.write(text.encode()))


def load_weights(path: str) -> dict:
    try:
        with open(path) as f:
            obj = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SerializationError(f"cannot read weights bundle: {e}")
    if obj.get("version") != WEIGHTS_VERSION:
        raise SerializationError(
            f"weights bundle version {obj.get('version')!r}, "
            f"expected {WEIGHTS_VERSION}")
    for key in ("topology", "layers"):
        if key not in obj:
            raise SerializationError(f"weights bundle missing {key!r}")
    return obj


# ---------------------------------------------------------------------------
# vanilla reference network
# ---------------------------------------------------------------------------

def reference_forward(obj: dict, x: np.ndarray) -> np.ndarray:
    """Dense forward pass straight from the weights bundle.

    Deliberately independent of the graph machinery: convolutions go
    through sliding windows, activations evaluate the basis expansion
    directly rather than the folded quadratic. Goldens are produced and
    checked against this path.
    """
    basis = hermite_coeffs(2)
    t = np.asarray(x, dtype=np.float64)
    snapshots: list[np.ndarray] = []
    x0 = t
    for entry in obj["layers"]:
        kind = entry["kind"]
        if kind == "conv":
            w = _load_array(entry, "weights")
            stride = int(entry.get("stride", 1))
            oc, ic, kh, kw = w.shape
            pad = np.pad(t, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
            win = np.lib.stride_tricks.sliding_window_view(pad, (kh, kw),
                                                           axis=(1, 2))
            out = np.einsum("oikl,ihwkl->ohw", w, win)
            if stride == 2:
                out = out[:, ::2, ::2]
            if entry.get("bias") is not None:
                out = out + _load_array(entry, "bias")[:, None, None]
            t = out
        elif kind == "act":
            chans = _load_aespa(entry, t.shape[0], "act")
            t = np.stack([aespa_eval_plain(t[c], ch, basis)
                          for c, ch in enumerate(chans)])
        elif kind == "downsample":
            t = t[:, ::2, ::2]
        elif kind == "avgpool":
            t = t.mean(axis=(1, 2))[:, None, None]
        elif kind == "fc":
            w = _load_array(entry, "weights")
            v = w @ t[:, 0, 0]
            if entry.get("bias") is not None:
                v = v + _load_array(entry, "bias")
            t = v
        elif kind == "resadd":
            src = int(entry["src"])
            t = t + (x0 if src == -1 else snapshots[src])
        else:
            raise GraphError(f"unknown layer kind {kind!r} in weights")
        snapshots.append(t)
    return t


# ---------------------------------------------------------------------------
# fixture generation
# ---------------------------------------------------------------------------

def gen_fixture(topology: str, seed: int, params: CkksParams,
                golden_count: int = 1) -> dict:
    """Seeded random weights bundle with reference goldens."""
    kinds, in_shape, _ = _topology_skeleton(topology)
    rng = np.random.default_rng(seed)
    layers = []
    c = in_shape.c
    for kd in kinds:
        kind = kd["kind"]
        if kind == "conv":
            fan = c * 9
            bound = (3.0 / fan) ** 0.5
            w = rng.uniform(-bound, bound, size=(kd["out_c"], c, 3, 3))
            b = rng.uniform(-0.1, 0.1, size=kd["out_c"])
            layers.append({
                "kind": "conv", "shape": [kd["out_c"], c, 3, 3],
                "stride": 1, "weights": _b64(w), "bias": _b64(b),
            })
            c = kd["out_c"]
        elif kind == "act":
            layers.append({
                "kind": "act",
                "aespa": {
                    "gamma": rng.uniform(0.8, 1.2, size=c).tolist(),
                    "beta": rng.uniform(-0.2, 0.2, size=c).tolist(),
                    "mu": rng.uniform(-0.1, 0.1, size=(c, 3)).tolist(),
                    "sigma2": rng.uniform(0.8, 1.25, size=(c, 3)).tolist(),
                    "eps": 1e-5,
                },
            })
        elif kind == "fc":
            bound = (3.0 / c) ** 0.5
            w = rng.uniform(-bound, bound, size=(kd["out"], c))
            b = rng.uniform(-0.1, 0.1, size=kd["out"])
            layers.append({
                "kind": "fc", "shape": [kd["out"], c],
                "weights": _b64(w), "bias": _b64(b),
            })
        elif kind == "resadd":
            layers.append({"kind": "resadd", "src": kd["src"]})
        else:
            layers.append({"kind": kind})
    obj = {
        "version": WEIGHTS_VERSION,
        "topology": topology,
        "params_digest": params.digest(),
        "layers": layers,
        "golden": [],
    }
    for _ in range(golden_count):
        xin = rng.uniform(-1.0, 1.0,
                          size=(in_shape.c, in_shape.h, in_shape.w))
        logits = reference_forward(obj, xin)
        obj["golden"].append({
            "input": xin.tolist(),
            "logits": np.asarray(logits).ravel().tolist(),
        })
    return obj
