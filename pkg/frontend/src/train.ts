/**
 * Trains the tiny CNN twice, once per activation, under identical
 * seeds and schedules, then packages the quadratic variant's weights
 * with goldens produced by its own inference forward.
 */

import { Dataset, IMG, makeDataset } from "./dataset.js";
import { Golden, WeightsBundle, buildBundle, goldenFrom } from "./export.js";
import { Batch, Model, Sgd, Variant, batchOf, crossEntropy } from "./nn.js";
import { Rng } from "./rng.js";

export interface TrainConfig {
  seed: number;
  epochs: number;
  batch: number;
  lr: number;
  trainSize: number;
  testSize: number;
  noise: number;
  goldenCount: number;
}

export const DEFAULTS: TrainConfig = {
  seed: 0,
  epochs: 24,
  batch: 32,
  lr: 0.05,
  trainSize: 1536,
  testSize: 512,
  noise: 0.25,
  goldenCount: 8,
};

/** Training produced a non-finite loss; the run cannot be exported. */
export class DivergenceError extends Error {}

/** Cosine decay from the base rate down to a tenth of it. */
export function lrAt(base: number, epoch: number, epochs: number): number {
  if (epochs <= 1) return base;
  const t = epoch / (epochs - 1);
  return base * (0.1 + 0.45 * (1 + Math.cos(Math.PI * t)));
}

function gather(ds: Dataset, indices: number[], from: number,
                upto: number): Batch {
  const n = upto - from;
  const sample = IMG * IMG;
  const out = batchOf(n, 1, IMG, IMG);
  for (let i = 0; i < n; i++) {
    const src = indices[from + i] * sample;
    out.data.set(ds.images.subarray(src, src + sample), i * sample);
  }
  return out;
}

export function accuracy(model: Model, ds: Dataset, chunk = 64): number {
  let hits = 0;
  const indices = Array.from({ length: ds.n }, (_, i) => i);
  for (let at = 0; at < ds.n; at += chunk) {
    const upto = Math.min(at + chunk, ds.n);
    const x = gather(ds, indices, at, upto);
    const logits = model.forward(x, false);
    for (let s = 0; s < x.n; s++) {
      let best = 0;
      for (let i = 1; i < logits.c; i++) {
        if (logits.data[s * logits.c + i] >
            logits.data[s * logits.c + best]) {
          best = i;
        }
      }
      if (best === ds.labels[at + s]) hits++;
    }
  }
  return hits / ds.n;
}

export interface VariantResult {
  model: Model;
  accuracy: number;
  losses: number[]; // mean loss per epoch
}

export function trainVariant(variant: Variant, cfg: TrainConfig,
                             train: Dataset, test: Dataset): VariantResult {
  // identical init and batch-order streams across variants
  const model = new Model(variant, new Rng(cfg.seed, "init"));
  const orderRng = new Rng(cfg.seed, "order");
  const sgd = new Sgd(model.params(), cfg.lr);
  const indices = Array.from({ length: train.n }, (_, i) => i);
  const losses: number[] = [];
  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    orderRng.shuffle(indices);
    sgd.lr = lrAt(cfg.lr, epoch, cfg.epochs);
    let epochLoss = 0;
    let batches = 0;
    for (let at = 0; at < train.n; at += cfg.batch) {
      const upto = Math.min(at + cfg.batch, train.n);
      const x = gather(train, indices, at, upto);
      const labels = new Int32Array(upto - at);
      for (let i = 0; i < labels.length; i++) {
        labels[i] = train.labels[indices[at + i]];
      }
      sgd.zeroGrad();
      const logits = model.forward(x, true);
      const grad = batchOf(logits.n, logits.c, 1, 1);
      const loss = crossEntropy(logits, labels, 0, grad);
      if (!Number.isFinite(loss)) {
        throw new DivergenceError(
          `${variant}: non-finite loss at epoch ${epoch}, sample ${at}`);
      }
      model.backward(grad);
      sgd.step();
      epochLoss += loss;
      batches++;
    }
    losses.push(epochLoss / batches);
  }
  return { model, accuracy: accuracy(model, test), losses };
}

export interface TrainOutcome {
  accRelu: number;
  accAespa: number;
  bundle: WeightsBundle;
  reluLosses: number[];
  aespaLosses: number[];
}

export function makeGoldens(model: Model, test: Dataset,
                            count: number): Golden[] {
  const goldens: Golden[] = [];
  const indices = Array.from({ length: test.n }, (_, i) => i);
  for (let i = 0; i < count; i++) {
    const x = gather(test, indices, i, i + 1);
    const logits = model.forward(x, false);
    goldens.push(goldenFrom(x, logits));
  }
  return goldens;
}

export function trainBoth(cfg: TrainConfig): TrainOutcome {
  const train = makeDataset(cfg.trainSize, new Rng(cfg.seed, "train-data"),
                            cfg.noise);
  const test = makeDataset(cfg.testSize, new Rng(cfg.seed, "test-data"),
                           cfg.noise);
  const relu = trainVariant("relu-bn", cfg, train, test);
  const aespa = trainVariant("aespa", cfg, train, test);
  const goldens = makeGoldens(aespa.model, test, cfg.goldenCount);
  return {
    accRelu: relu.accuracy,
    accAespa: aespa.accuracy,
    bundle: buildBundle(aespa.model, goldens),
    reluLosses: relu.losses,
    aespaLosses: aespa.losses,
  };
}
