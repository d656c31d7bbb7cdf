"""Command-line tooling around the packed CNN pipeline.

Subcommands: keygen, encrypt, infer, decrypt, plan, verify, gen-fixture,
bench-ops. Exit codes: 0 success, 2 usage or parameter problems, 3 I/O
and digest mismatches, 4 verification failures; errors print one line to
stderr. Every JSON report is versioned and carries an "insecure" flag;
the desk-scale parameter presets always set it, and stderr gets a warning
once per run.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time

import numpy as np

from . import ckks, graph, io, kernels, packing
from .errors import HcnnError, SerializationError
from .graph import REPORT_VERSION, TIMING_NOTE

BENCH_OPS = ("encode", "hadd", "pmult", "hmult", "rescale", "rotate")


def _params(args) -> ckks.CkksParams:
    params = ckks.params_by_name(args.params)
    if params.toy:
        print(
            f"WARNING: parameter set {params.name!r} is desk-scale; "
            "no security is provided",
            file=sys.stderr,
        )
    return params


def _emit(obj: dict, path: str | None = None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path:
        io._atomic_write(path, lambda f: f.write(text.encode()))
    sys.stdout.write(text)


def _load_bundle(args, params) -> dict:
    fx = graph.load_weights(args.weights)
    # bundles without a params_digest (trainer exports) run under any set
    want = fx.get("params_digest")
    if want is not None and want != params.digest():
        raise SerializationError(
            f"weights bundle targets parameter digest "
            f"{want}, keys use {params.digest()}")
    return fx


def _build(fx: dict, args, alternating=True) -> graph.HcnnGraph:
    return graph.build_graph(fx["topology"], fx, alternating=alternating,
                             multiplex=args.multiplex)


def _cmd_keygen(args) -> int:
    params = _params(args)
    rng = np.random.default_rng(args.seed)
    if args.weights:
        fx = _load_bundle(args, params)
        g = _build(fx, args)
        steps = graph.required_rotation_steps(
            g, params.slots, include_fixed=args.with_fixed_baseline)
    else:
        steps = {1 << i for i in range((params.n // 2).bit_length() - 1)}
    ks = ckks.keygen(params, rng, rotations=sorted(steps))
    io.save_keyset(args.out, ks)
    _emit({
        "version": REPORT_VERSION,
        "command": "keygen",
        "params": params.name,
        "params_digest": params.digest(),
        "rotation_steps": len(steps),
        "out": args.out,
        "insecure": params.toy,
    })
    return 0


def _cmd_encrypt(args) -> int:
    params = _params(args)
    ks = io.load_keyset(args.keys, params)
    with open(args.input) as f:
        payload = json.load(f)
    x = np.asarray(payload["input"] if isinstance(payload, dict) else payload,
                   dtype=np.float64)
    g = graph.build_graph(args.topology, multiplex=args.multiplex)
    if x.shape != (g.input_shape.c, g.input_shape.h, g.input_shape.w):
        raise SerializationError(
            f"input shape {x.shape} does not match {args.topology}")
    level = args.level
    if level is None:
        level = graph.plan_levels(g, params.max_level).entry_levels[0]
    packed = packing.encrypt_tensor(x, g.input_format, ks,
                                    np.random.default_rng(args.seed), level)
    io.save_packed_tensor(args.out, packed, params)
    _emit({
        "version": REPORT_VERSION,
        "command": "encrypt",
        "params": params.name,
        "level": level,
        "ciphertexts": len(packed.cts),
        "out": args.out,
        "insecure": params.toy,
    })
    return 0


def _cmd_infer(args) -> int:
    params = _params(args)
    ks = io.load_keyset(args.keys, params)
    fx = _load_bundle(args, params)
    g = _build(fx, args, alternating=not args.fixed_baseline)
    plan = graph.plan_levels(g, params.max_level)
    packed = io.load_packed_tensor(args.input, params)
    out, report = graph.execute(g, plan, packed, ks, "encrypted")
    if isinstance(out, ckks.Ciphertext):
        io.save_ciphertext(args.out, out, params)
    else:
        io.save_packed_tensor(args.out, out, params)
    doc = report.as_dict()
    doc.update({
        "command": "infer",
        "topology": fx["topology"],
        "weights_digest": graph.weights_digest(fx),
        "plan": plan.as_dict(),
        "conv_path": "fixed" if args.fixed_baseline else "alternating",
        "out": args.out,
    })
    _emit(doc, args.report)
    return 0


def _cmd_decrypt(args) -> int:
    params = _params(args)
    ks = io.load_keyset(args.keys, params)
    g = graph.build_graph(args.topology, multiplex=args.multiplex)
    try:
        ct = io.load_ciphertext(args.input, params)
        values = packing.read_logits(ct, g.n_classes, g.formats[-1], ks)
    except SerializationError:
        packed = io.load_packed_tensor(args.input, params)
        values = packing.decrypt_tensor(packed, ks).ravel()
    _emit({
        "version": REPORT_VERSION,
        "command": "decrypt",
        "logits": [float(v) for v in values],
        "argmax": int(np.argmax(values)),
        "insecure": params.toy,
    }, args.out)
    return 0


def _cmd_plan(args) -> int:
    params = _params(args)
    g = graph.build_graph(args.topology, multiplex=args.multiplex)
    plan = graph.plan_levels(g, params.max_level,
                             refresh_target=args.refresh_target)
    _emit({
        "version": REPORT_VERSION,
        "command": "plan",
        "topology": args.topology,
        "params": params.name,
        "max_level": params.max_level,
        "layers": [
            {"name": l.name, "kind": l.kind, "level_cost": l.level_cost,
             "live_ciphertexts": n}
            for l, n in zip(g.layers, g.n_cts_entering)
        ],
        "total_level_cost": g.total_level_cost(),
        "plan": plan.as_dict(),
        "insecure": params.toy,
    })
    return 0


def _cmd_verify(args) -> int:
    params = _params(args)
    fx = _load_bundle(args, params)
    g = _build(fx, args)
    plan = graph.plan_levels(g, params.max_level)
    goldens = fx.get("golden") or []
    if not goldens:
        raise SerializationError("weights bundle has no goldens to verify")
    if args.golden_index is not None:
        goldens = [goldens[args.golden_index]]
    tol = args.tolerance
    if tol is None:
        tol = 1e-2 if args.mode == "encrypted" else 1e-4
    ks = io.load_keyset(args.keys, params) if args.mode == "encrypted" else None
    rng = np.random.default_rng(args.seed)
    rows = []
    cache: dict = {}
    for idx, gold in enumerate(goldens):
        x = np.asarray(gold["input"], dtype=np.float64)
        want = np.asarray(gold["logits"], dtype=np.float64)
        ref, _ = graph.execute(g, plan, x, mode="plaintext-ref")
        if args.mode == "encrypted":
            packed = packing.encrypt_tensor(x, g.input_format, ks, rng,
                                            plan.entry_levels[0])
            out, _ = graph.execute(g, plan, packed, ks, "encrypted",
                                   cache=cache)
            got = packing.read_logits(out, g.n_classes, g.formats[-1], ks)
            diff = float(np.abs(got - np.asarray(ref)).max())
        else:
            got = np.asarray(ref)
            diff = 0.0
        rows.append({
            "golden": idx,
            "max_abs_diff": diff,
            "golden_max_abs_diff": float(np.abs(got - want).max()),
            "argmax_match": bool(np.argmax(got) == np.argmax(want)),
        })
    worst = max(max(r["max_abs_diff"], r["golden_max_abs_diff"])
                for r in rows)
    ok = worst <= tol
    _emit({
        "version": REPORT_VERSION,
        "command": "verify",
        "mode": args.mode,
        "tolerance": tol,
        "max_abs_diff": worst,
        "pass": ok,
        "goldens": rows,
        "insecure": params.toy,
    }, args.out)
    if not ok:
        print(f"hcnn: verification failed: max abs diff {worst:.3e} "
              f"exceeds {tol:.0e}", file=sys.stderr)
        return 4
    return 0


def _cmd_gen_fixture(args) -> int:
    params = _params(args)
    fx = graph.gen_fixture(args.topology, args.seed, params,
                           golden_count=args.golden_count)
    graph.save_weights(fx, args.out)
    _emit({
        "version": REPORT_VERSION,
        "command": "gen-fixture",
        "topology": args.topology,
        "seed": args.seed,
        "golden_count": args.golden_count,
        "weights_digest": graph.weights_digest(fx),
        "params_digest": params.digest(),
        "out": args.out,
        "insecure": params.toy,
    })
    return 0


def _bench_closures(params, ks, rng):
    vals = rng.uniform(-1, 1, params.slots)
    level = params.max_level
    pt = ckks.encode(vals, params, level)
    a = ckks.encrypt(pt, ks, rng)
    b = ckks.encrypt(ckks.encode(rng.uniform(-1, 1, params.slots),
                                 params, level), ks, rng)
    from .ring import to_mont_rows
    rows = to_mont_rows(pt.poly)
    product = ckks.hmult(a, b, ks)
    return {
        "encode": lambda: ckks.encode(vals, params, level),
        "hadd": lambda: ckks.hadd(a, b),
        "pmult": lambda: ckks.pmult_mont(a, rows, pt.scale),
        "hmult": lambda: ckks.hmult(a, b, ks),
        "rescale": lambda: ckks.rescale(product, params),
        "rotate": lambda: ckks.rotate(a, 1, ks),
    }


def _cmd_bench_ops(args) -> int:
    params = _params(args)
    rng = np.random.default_rng(args.seed)
    ks = ckks.keygen(params, rng, rotations=[1])
    closures = _bench_closures(params, ks, rng)
    results = {}
    for name in BENCH_OPS:
        fn = closures[name]
        for _ in range(3):
            fn()
        times = []
        for _ in range(args.reps):
            t0 = time.perf_counter()
            fn()
            times.append((time.perf_counter() - t0) * 1e3)
        q1, med, q3 = statistics.quantiles(times, n=4)
        results[name] = {
            "median_ms": round(med, 4),
            "iqr_ms": round(q3 - q1, 4),
        }
    _emit({
        "version": REPORT_VERSION,
        "command": "bench-ops",
        "params": params.name,
        "reps": args.reps,
        "ops": results,
        "hmult_gt_hadd": results["hmult"]["median_ms"]
        > results["hadd"]["median_ms"],
        "note": TIMING_NOTE,
        "insecure": params.toy,
    }, args.out)
    return 0


def _add_common(p, *, keys=False, weights=False, out=True):
    p.add_argument("--params", default="desk-A",
                   help="parameter preset (desk-A, desk-B, unit)")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for any randomness in this command")
    p.add_argument("--threads", type=int, default=None,
                   help="cap backend worker threads")
    p.add_argument("--multiplex", type=int, default=8,
                   help="channels multiplexed per ciphertext block")
    if keys:
        p.add_argument("--keys", required=True, help="keyset container")
    if weights:
        p.add_argument("--weights", required=True, help="weights bundle JSON")
    if out:
        p.add_argument("--out", required=True, help="output path")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hcnn",
        description="packed CNN inference over RNS-CKKS (desk scale)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate a keyset")
    _add_common(p, keys=False)
    p.add_argument("--weights", default=None,
                   help="derive exact rotation steps from this bundle "
                        "(default: power-of-two steps)")
    p.add_argument("--with-fixed-baseline", action="store_true",
                   help="also cover the fixed-layout convolution path")
    p.set_defaults(fn=_cmd_keygen)

    p = sub.add_parser("encrypt", help="pack and encrypt an input tensor")
    _add_common(p, keys=True)
    p.add_argument("--input", required=True, help="input tensor JSON")
    p.add_argument("--topology", default="tiny-cnn")
    p.add_argument("--level", type=int, default=None,
                   help="encryption level (default: the plan entry level)")
    p.set_defaults(fn=_cmd_encrypt)

    p = sub.add_parser("infer", help="run encrypted inference")
    _add_common(p, keys=True, weights=True)
    p.add_argument("--input", required=True, help="packed-tensor container")
    p.add_argument("--report", default=None, help="cost report JSON path")
    p.add_argument("--fixed-baseline", action="store_true",
                   help="use the fixed-layout convolution path")
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("decrypt", help="decrypt logits or a packed tensor")
    _add_common(p, keys=True, out=False)
    p.add_argument("--input", required=True)
    p.add_argument("--topology", default="tiny-cnn")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(fn=_cmd_decrypt)

    p = sub.add_parser("plan", help="show the level plan for a topology")
    _add_common(p, out=False)
    p.add_argument("--topology", default="tiny-cnn")
    p.add_argument("--refresh-target", type=int, default=None)
    p.set_defaults(fn=_cmd_plan)

    p = sub.add_parser("verify",
                       help="check inference against the plaintext reference")
    _add_common(p, weights=True, out=False)
    p.add_argument("--keys", default=None,
                   help="keyset container (needed for encrypted mode)")
    p.add_argument("--mode", choices=["encrypted", "plaintext-ref"],
                   default="encrypted")
    p.add_argument("--tolerance", type=float, default=None,
                   help="max abs diff allowed (default 1e-2 encrypted, "
                        "1e-4 plaintext-ref)")
    p.add_argument("--golden-index", type=int, default=None,
                   help="verify a single golden (default: all)")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("gen-fixture", help="emit seeded random weights")
    _add_common(p)
    p.add_argument("--topology", default="tiny-cnn")
    p.add_argument("--golden-count", type=int, default=1)
    p.set_defaults(fn=_cmd_gen_fixture)

    p = sub.add_parser("bench-ops", help="time primitive operations")
    _add_common(p, out=False)
    p.add_argument("--reps", type=int, default=100,
                   help="repetitions per op (at least 100 for reports)")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(fn=_cmd_bench_ops)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        kernels.set_num_threads(args.threads)
    try:
        return args.fn(args)
    except (SerializationError, OSError, json.JSONDecodeError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"hcnn: error: {msg}", file=sys.stderr)
        return 3
    except HcnnError as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"hcnn: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
