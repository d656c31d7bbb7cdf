/**
 * Weights-bundle serialization.
 *
 * The on-disk format is the version-1 JSON bundle the inference side
 * loads: base64 little-endian float64 blobs for conv and fc tensors,
 * plain lists for activation statistics, goldens as nested lists. The
 * digest here reproduces the canonical content hash byte for byte so
 * both sides can agree on what was exported without parsing floats.
 */

import { createHash } from "node:crypto";

import { AespaAct, Batch, Model } from "./nn.js";

export const WEIGHTS_VERSION = 1;
export const TOPOLOGY = "tiny-cnn";

export interface ConvEntry {
  kind: "conv";
  shape: number[];
  stride: number;
  weights: string;
  bias: string;
}

export interface ActEntry {
  kind: "act";
  aespa: {
    gamma: number[];
    beta: number[];
    mu: number[][];
    sigma2: number[][];
    eps: number;
  };
}

export interface FcEntry {
  kind: "fc";
  shape: number[];
  weights: string;
  bias: string;
}

export interface PlainEntry {
  kind: "avgpool";
}

export type LayerEntry = ConvEntry | ActEntry | FcEntry | PlainEntry;

export interface Golden {
  input: number[][][];
  logits: number[];
}

export interface WeightsBundle {
  version: number;
  topology: string;
  layers: LayerEntry[];
  golden: Golden[];
}

export function b64f64(a: ArrayLike<number>): string {
  const buf = Buffer.alloc(a.length * 8);
  for (let i = 0; i < a.length; i++) buf.writeDoubleLE(a[i], i * 8);
  return buf.toString("base64");
}

function toNested(data: Float64Array, c: number, h: number,
                  w: number): number[][][] {
  const out: number[][][] = [];
  for (let ch = 0; ch < c; ch++) {
    const rows: number[][] = [];
    for (let y = 0; y < h; y++) {
      const row: number[] = [];
      for (let x = 0; x < w; x++) row.push(data[(ch * h + y) * w + x]);
      rows.push(row);
    }
    out.push(rows);
  }
  return out;
}

/** One golden pair from a single-sample batch and its logits. */
export function goldenFrom(input: Batch, logits: Batch): Golden {
  return {
    input: toNested(input.data, input.c, input.h, input.w),
    logits: Array.from(logits.data),
  };
}

export function buildBundle(model: Model, goldens: Golden[]): WeightsBundle {
  if (model.variant !== "aespa") {
    throw new Error("only the aespa variant is exported");
  }
  const layers: LayerEntry[] = [];
  const pushConv = (i: number) => {
    const conv = model.convs[i];
    layers.push({
      kind: "conv",
      shape: [conv.outC, conv.inC, 3, 3],
      stride: 1,
      weights: b64f64(conv.w),
      bias: b64f64(conv.b),
    });
  };
  const pushAct = (i: number) => {
    const stats = (model.acts[i] as AespaAct).exportStats();
    layers.push({
      kind: "act",
      aespa: {
        gamma: stats.map((s) => s.gamma),
        beta: stats.map((s) => s.beta),
        mu: stats.map((s) => [...s.mu]),
        sigma2: stats.map((s) => [...s.sigma2]),
        eps: stats[0].eps,
      },
    });
  };
  pushConv(0);
  pushAct(0);
  pushConv(1);
  pushAct(1);
  pushConv(2);
  layers.push({ kind: "avgpool" });
  layers.push({
    kind: "fc",
    shape: [model.fc.outC, model.fc.inC],
    weights: b64f64(model.fc.w),
    bias: b64f64(model.fc.b),
  });
  return {
    version: WEIGHTS_VERSION,
    topology: TOPOLOGY,
    layers,
    golden: goldens,
  };
}

// ---------------------------------------------------------------------------
// canonical digest
// ---------------------------------------------------------------------------

const DIGEST_FIELDS: Record<string, readonly string[]> = {
  conv: ["bias", "shape", "stride", "weights"],
  act: ["beta", "eps", "gamma", "mu", "sigma2"],
  fc: ["bias", "shape", "weights"],
  avgpool: [],
  downsample: [],
  resadd: [],
};

function flattenNumbers(v: unknown, out: number[]): void {
  if (Array.isArray(v)) {
    for (const item of v) flattenNumbers(item, out);
  } else {
    out.push(v as number);
  }
}

function fieldBytes(value: unknown): Buffer {
  if (typeof value === "string") {
    return Buffer.from(value, "base64"); // already little-endian f64
  }
  const flat: number[] = [];
  flattenNumbers(value, flat);
  const buf = Buffer.alloc(flat.length * 8);
  for (let i = 0; i < flat.length; i++) buf.writeDoubleLE(flat[i], i * 8);
  return buf;
}

/**
 * Content hash over layer numbers only, layout-independent.
 *
 * Per layer: the kind, then each present field in a fixed per-kind
 * order, every value rendered as little-endian float64 bytes (integers
 * like shape and stride included).
 */
export function weightsDigest(bundle: WeightsBundle): string {
  const h = createHash("sha256");
  h.update(`hcnn-weights-v${WEIGHTS_VERSION};${bundle.topology};`);
  for (const entry of bundle.layers) {
    h.update(entry.kind + ";");
    const src: Record<string, unknown> = { ...entry };
    if ("aespa" in src) {
      const blk = src.aespa as Record<string, unknown>;
      delete src.aespa;
      Object.assign(src, blk);
    }
    for (const name of DIGEST_FIELDS[entry.kind]) {
      if (!(name in src) || src[name] == null) continue;
      h.update(name + ":");
      h.update(fieldBytes(src[name]));
      h.update(";");
    }
  }
  return h.digest("hex");
}
