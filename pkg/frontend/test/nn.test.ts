import { describe, expect, it } from "vitest";

import { activationValue } from "../src/hermite.js";
import {
  AespaAct, Batch, BnRelu, Conv2d, GlobalAvgPool, Layer, Linear, Model,
  batchOf, crossEntropy,
} from "../src/nn.js";
import { Rng } from "../src/rng.js";

function fillNormal(b: Batch, rng: Rng, scale = 1): void {
  for (let i = 0; i < b.data.length; i++) b.data[i] = scale * rng.normal();
}

function numericGrad(loss: () => number, value: Float64Array,
                     i: number, h = 1e-5): number {
  const keep = value[i];
  value[i] = keep + h;
  const fp = loss();
  value[i] = keep - h;
  const fm = loss();
  value[i] = keep;
  return (fp - fm) / (2 * h);
}

function agree(numeric: number, analytic: number, tol = 1e-5): void {
  const err = Math.abs(numeric - analytic) /
    Math.max(1, Math.abs(numeric) + Math.abs(analytic));
  expect(err).toBeLessThan(tol);
}

/**
 * Finite-difference check of one layer: the scalar loss is a fixed
 * random projection of the training-mode output, so every parameter
 * and every input element gets an independent gradient to compare.
 */
function checkLayerGrads(layer: Layer, x: Batch, rng: Rng): void {
  const y0 = layer.forward(x, true);
  const proj = new Float64Array(y0.data.length);
  for (let i = 0; i < proj.length; i++) proj[i] = rng.normal();
  const loss = () => {
    const y = layer.forward(x, true);
    let acc = 0;
    for (let i = 0; i < proj.length; i++) acc += proj[i] * y.data[i];
    return acc;
  };
  for (const p of layer.params()) p.grad.fill(0);
  layer.forward(x, true);
  const g: Batch = { n: y0.n, c: y0.c, h: y0.h, w: y0.w,
                     data: Float64Array.from(proj) };
  const dx = layer.backward(g);
  for (const p of layer.params()) {
    for (let i = 0; i < p.value.length; i++) {
      agree(numericGrad(loss, p.value, i), p.grad[i]);
    }
  }
  for (let i = 0; i < x.data.length; i++) {
    agree(numericGrad(loss, x.data, i), dx.data[i]);
  }
}

describe("layer gradients", () => {
  it("conv2d", () => {
    const rng = new Rng(11, "grad");
    const layer = new Conv2d(2, 3, rng);
    const x = batchOf(2, 2, 4, 4);
    fillNormal(x, rng);
    checkLayerGrads(layer, x, rng);
  });

  it("linear", () => {
    const rng = new Rng(12, "grad");
    const layer = new Linear(5, 4, rng);
    const x = batchOf(3, 5, 1, 1);
    fillNormal(x, rng);
    checkLayerGrads(layer, x, rng);
  });

  it("global average pool", () => {
    const rng = new Rng(13, "grad");
    const x = batchOf(2, 3, 4, 4);
    fillNormal(x, rng);
    checkLayerGrads(new GlobalAvgPool(), x, rng);
  });

  it("quadratic activation with batch statistics", () => {
    const rng = new Rng(14, "grad");
    const layer = new AespaAct(2);
    // exercise non-trivial affine parameters too
    layer.gamma[0] = 1.3;
    layer.gamma[1] = 0.7;
    layer.beta[0] = -0.4;
    layer.beta[1] = 0.25;
    const x = batchOf(2, 2, 5, 5);
    fillNormal(x, rng);
    checkLayerGrads(layer, x, rng);
  });

  it("batchnorm relu away from the kink", () => {
    const rng = new Rng(15, "grad");
    const layer = new BnRelu(2);
    const x = batchOf(2, 2, 5, 5);
    fillNormal(x, rng);
    // finite differences need margin from the relu boundary; with
    // gamma 1 and beta 0 the pre-activation is xhat, so compute the
    // batch statistics directly and take the smallest |xhat|
    let margin = Infinity;
    for (let ch = 0; ch < 2; ch++) {
      let sum = 0;
      let sq = 0;
      for (let s = 0; s < 2; s++) {
        const base = (s * 2 + ch) * 25;
        for (let p = 0; p < 25; p++) {
          sum += x.data[base + p];
          sq += x.data[base + p] * x.data[base + p];
        }
      }
      const mu = sum / 50;
      const sd = Math.sqrt(sq / 50 - mu * mu + 1e-5);
      for (let s = 0; s < 2; s++) {
        const base = (s * 2 + ch) * 25;
        for (let p = 0; p < 25; p++) {
          margin = Math.min(margin, Math.abs((x.data[base + p] - mu) / sd));
        }
      }
    }
    expect(margin).toBeGreaterThan(1e-3);
    checkLayerGrads(layer, x, rng);
  });
});

describe("softmax cross-entropy", () => {
  it("gradient matches finite differences", () => {
    const rng = new Rng(16, "grad");
    const logits = batchOf(4, 10, 1, 1);
    fillNormal(logits, rng, 2);
    const labels = new Int32Array([3, 0, 9, 7]);
    const grad = batchOf(4, 10, 1, 1);
    crossEntropy(logits, labels, 0, grad);
    const loss = () => {
      const tmp = batchOf(4, 10, 1, 1);
      return crossEntropy(logits, labels, 0, tmp);
    };
    for (let i = 0; i < logits.data.length; i++) {
      agree(numericGrad(loss, logits.data, i), grad.data[i], 1e-6);
    }
  });

  it("is the mean negative log likelihood", () => {
    const logits = batchOf(1, 10, 1, 1);
    logits.data.fill(0);
    const labels = new Int32Array([4]);
    const grad = batchOf(1, 10, 1, 1);
    const loss = crossEntropy(logits, labels, 0, grad);
    expect(loss).toBeCloseTo(Math.log(10), 12);
  });
});

describe("quadratic activation semantics", () => {
  it("inference forward equals the per-channel closed form", () => {
    const layer = new AespaAct(2);
    layer.gamma[0] = 1.2;
    layer.beta[0] = -0.3;
    layer.gamma[1] = 0.8;
    layer.beta[1] = 0.5;
    layer.runMu.set([1, 0.1, -0.05, 1, -0.2, 0.15]);
    layer.runVar.set([0, 0.9, 1.2, 0, 1.1, 0.7]);
    const stats = layer.exportStats();
    const rng = new Rng(17, "sem");
    const x = batchOf(3, 2, 4, 4);
    fillNormal(x, rng);
    const y = layer.forward(x, false);
    for (let s = 0; s < 3; s++) {
      for (let ch = 0; ch < 2; ch++) {
        const base = (s * 2 + ch) * 16;
        for (let p = 0; p < 16; p++) {
          const want = activationValue(x.data[base + p], stats[ch]);
          expect(Math.abs(y.data[base + p] - want)).toBeLessThan(1e-12);
        }
      }
    }
  });

  it("keeps the constant basis statistics exact through training", () => {
    const layer = new AespaAct(3);
    const rng = new Rng(18, "sem");
    for (let step = 0; step < 5; step++) {
      const x = batchOf(4, 3, 4, 4);
      fillNormal(x, rng);
      layer.forward(x, true);
    }
    for (let ch = 0; ch < 3; ch++) {
      expect(layer.runMu[ch * 3]).toBe(1);
      expect(layer.runVar[ch * 3]).toBe(0);
    }
  });

  it("tracks running statistics toward the batch moments", () => {
    const layer = new AespaAct(1);
    const rng = new Rng(19, "sem");
    const x = batchOf(8, 1, 8, 8);
    fillNormal(x, rng);
    for (let step = 0; step < 200; step++) layer.forward(x, true);
    // same batch every step: the running stats converge to its moments
    let s1 = 0;
    let q1 = 0;
    for (const v of x.data) {
      s1 += v;
      q1 += v * v;
    }
    const m = x.data.length;
    const mu1 = s1 / m;
    const var1 = q1 / m - mu1 * mu1;
    expect(layer.runMu[1]).toBeCloseTo(mu1, 8);
    expect(layer.runVar[1]).toBeCloseTo(var1, 8);
  });
});

describe("model assembly", () => {
  it("both variants draw identical initial conv and fc weights", () => {
    const a = new Model("aespa", new Rng(0, "init"));
    const b = new Model("relu-bn", new Rng(0, "init"));
    for (let i = 0; i < 3; i++) {
      expect(Array.from(a.convs[i].w)).toEqual(Array.from(b.convs[i].w));
    }
    expect(Array.from(a.fc.w)).toEqual(Array.from(b.fc.w));
  });

  it("end-to-end gradient spot check through the full net", () => {
    const rng = new Rng(20, "e2e");
    const model = new Model("aespa", new Rng(21, "init"));
    const x = batchOf(2, 1, 8, 8);
    fillNormal(x, rng, 0.5);
    const labels = new Int32Array([2, 8]);
    const loss = () => {
      const logits = model.forward(x, true);
      const tmp = batchOf(2, 10, 1, 1);
      return crossEntropy(logits, labels, 0, tmp);
    };
    const params = model.params();
    for (const p of params) p.grad.fill(0);
    const logits = model.forward(x, true);
    const grad = batchOf(2, 10, 1, 1);
    crossEntropy(logits, labels, 0, grad);
    model.backward(grad);
    // a few entries from every parameter tensor
    for (const p of params) {
      for (const i of [0, Math.floor(p.value.length / 2),
                       p.value.length - 1]) {
        agree(numericGrad(loss, p.value, i), p.grad[i], 1e-4);
      }
    }
  });
});
