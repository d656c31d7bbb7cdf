/**
 * Float64 layers with hand-written backprop, sized for an 8x8 CNN.
 *
 * Two activation choices train against each other: the quadratic Hermite
 * activation with per-basis normalization, and a plain batchnorm+ReLU
 * baseline. Everything runs in double precision so the exported weights
 * and goldens carry no framework rounding.
 */

import { ChannelStats, F_HAT } from "./hermite.js";
import { Rng } from "./rng.js";

export interface Batch {
  n: number;
  c: number;
  h: number;
  w: number;
  data: Float64Array;
}

export function batchOf(n: number, c: number, h: number, w: number): Batch {
  return { n, c, h, w, data: new Float64Array(n * c * h * w) };
}

export interface Param {
  value: Float64Array;
  grad: Float64Array;
}

export interface Layer {
  forward(x: Batch, training: boolean): Batch;
  backward(g: Batch): Batch;
  params(): Param[];
}

const MOMENTUM = 0.1; // running-statistics update rate

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

export class Conv2d implements Layer {
  readonly inC: number;
  readonly outC: number;
  readonly k = 3;
  w: Float64Array; // [outC][inC][3][3]
  b: Float64Array;
  private dw: Float64Array;
  private db: Float64Array;
  private x: Batch | null = null;

  constructor(inC: number, outC: number, rng: Rng) {
    this.inC = inC;
    this.outC = outC;
    const fan = inC * this.k * this.k;
    const bound = Math.sqrt(3 / fan);
    this.w = new Float64Array(outC * fan);
    for (let i = 0; i < this.w.length; i++) {
      this.w[i] = rng.uniform(-bound, bound);
    }
    this.b = new Float64Array(outC);
    this.dw = new Float64Array(this.w.length);
    this.db = new Float64Array(outC);
  }

  params(): Param[] {
    return [
      { value: this.w, grad: this.dw },
      { value: this.b, grad: this.db },
    ];
  }

  forward(x: Batch, _training: boolean): Batch {
    this.x = x;
    const { n, h, w } = x;
    const out = batchOf(n, this.outC, h, w);
    const xd = x.data;
    const od = out.data;
    for (let s = 0; s < n; s++) {
      for (let oc = 0; oc < this.outC; oc++) {
        const ob = ((s * this.outC + oc) * h) * w;
        for (let y = 0; y < h; y++) {
          for (let xx = 0; xx < w; xx++) {
            let acc = this.b[oc];
            for (let ic = 0; ic < this.inC; ic++) {
              const ib = ((s * this.inC + ic) * h) * w;
              const wb = (oc * this.inC + ic) * 9;
              for (let ky = 0; ky < 3; ky++) {
                const sy = y + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (let kx = 0; kx < 3; kx++) {
                  const sx = xx + kx - 1;
                  if (sx < 0 || sx >= w) continue;
                  acc += this.w[wb + ky * 3 + kx] * xd[ib + sy * w + sx];
                }
              }
            }
            od[ob + y * w + xx] = acc;
          }
        }
      }
    }
    return out;
  }

  backward(g: Batch): Batch {
    const x = this.x!;
    const { n, h, w } = x;
    const gd = g.data;
    const xd = x.data;
    const dx = batchOf(n, this.inC, h, w);
    const dd = dx.data;
    for (let s = 0; s < n; s++) {
      for (let oc = 0; oc < this.outC; oc++) {
        const ob = ((s * this.outC + oc) * h) * w;
        for (let y = 0; y < h; y++) {
          for (let xx = 0; xx < w; xx++) {
            const gv = gd[ob + y * w + xx];
            if (gv === 0) continue;
            this.db[oc] += gv;
            for (let ic = 0; ic < this.inC; ic++) {
              const ib = ((s * this.inC + ic) * h) * w;
              const wb = (oc * this.inC + ic) * 9;
              for (let ky = 0; ky < 3; ky++) {
                const sy = y + ky - 1;
                if (sy < 0 || sy >= h) continue;
                for (let kx = 0; kx < 3; kx++) {
                  const sx = xx + kx - 1;
                  if (sx < 0 || sx >= w) continue;
                  const xi = ib + sy * w + sx;
                  this.dw[wb + ky * 3 + kx] += gv * xd[xi];
                  dd[xi] += gv * this.w[wb + ky * 3 + kx];
                }
              }
            }
          }
        }
      }
    }
    return dx;
  }
}

// ---------------------------------------------------------------------------
// quadratic Hermite activation with per-basis normalization
// ---------------------------------------------------------------------------

export class AespaAct implements Layer {
  readonly c: number;
  readonly eps = 1e-5;
  gamma: Float64Array;
  beta: Float64Array;
  runMu: Float64Array; // [c][3]
  runVar: Float64Array; // [c][3]
  private dgamma: Float64Array;
  private dbeta: Float64Array;
  private x: Batch | null = null;
  private xhat1: Float64Array | null = null;
  private xhat2: Float64Array | null = null;
  private u: Float64Array | null = null; // pre-affine sum
  private s: Float64Array | null = null; // [c][3] used std
  private trained = false;

  constructor(c: number) {
    this.c = c;
    this.gamma = new Float64Array(c).fill(1);
    this.beta = new Float64Array(c);
    this.dgamma = new Float64Array(c);
    this.dbeta = new Float64Array(c);
    // exact gaussian-input statistics of the three basis values
    this.runMu = new Float64Array(c * 3);
    this.runVar = new Float64Array(c * 3);
    for (let ch = 0; ch < c; ch++) {
      this.runMu[ch * 3] = 1;
      this.runVar[ch * 3 + 1] = 1;
      this.runVar[ch * 3 + 2] = 1;
    }
  }

  params(): Param[] {
    return [
      { value: this.gamma, grad: this.dgamma },
      { value: this.beta, grad: this.dbeta },
    ];
  }

  exportStats(): ChannelStats[] {
    const out: ChannelStats[] = [];
    for (let ch = 0; ch < this.c; ch++) {
      out.push({
        gamma: this.gamma[ch],
        beta: this.beta[ch],
        mu: [this.runMu[ch * 3], this.runMu[ch * 3 + 1],
             this.runMu[ch * 3 + 2]],
        sigma2: [this.runVar[ch * 3], this.runVar[ch * 3 + 1],
                 this.runVar[ch * 3 + 2]],
        eps: this.eps,
      });
    }
    return out;
  }

  forward(x: Batch, training: boolean): Batch {
    const { n, c, h, w } = x;
    const plane = h * w;
    const m = n * plane;
    const xd = x.data;
    const out = batchOf(n, c, h, w);
    const od = out.data;
    const xhat1 = new Float64Array(n * c * plane);
    const xhat2 = new Float64Array(n * c * plane);
    const u = new Float64Array(n * c * plane);
    const s = new Float64Array(c * 3);
    for (let ch = 0; ch < c; ch++) {
      // basis moments over the batch and both spatial dims
      let mu1: number;
      let mu2: number;
      let var1: number;
      let var2: number;
      let mu0: number;
      let var0: number;
      if (training) {
        let s1 = 0;
        let s2 = 0;
        let q1 = 0;
        let q2 = 0;
        for (let sN = 0; sN < n; sN++) {
          const base = (sN * c + ch) * plane;
          for (let p = 0; p < plane; p++) {
            const v = xd[base + p];
            const t2 = (v * v - 1) / Math.SQRT2;
            s1 += v;
            q1 += v * v;
            s2 += t2;
            q2 += t2 * t2;
          }
        }
        mu1 = s1 / m;
        mu2 = s2 / m;
        var1 = Math.max(q1 / m - mu1 * mu1, 0);
        var2 = Math.max(q2 / m - mu2 * mu2, 0);
        mu0 = 1; // the degree-0 basis is constant
        var0 = 0;
        const k = ch * 3;
        this.runMu[k] += MOMENTUM * (mu0 - this.runMu[k]);
        this.runMu[k + 1] += MOMENTUM * (mu1 - this.runMu[k + 1]);
        this.runMu[k + 2] += MOMENTUM * (mu2 - this.runMu[k + 2]);
        this.runVar[k] += MOMENTUM * (var0 - this.runVar[k]);
        this.runVar[k + 1] += MOMENTUM * (var1 - this.runVar[k + 1]);
        this.runVar[k + 2] += MOMENTUM * (var2 - this.runVar[k + 2]);
      } else {
        const k = ch * 3;
        mu0 = this.runMu[k];
        mu1 = this.runMu[k + 1];
        mu2 = this.runMu[k + 2];
        var0 = this.runVar[k];
        var1 = this.runVar[k + 1];
        var2 = this.runVar[k + 2];
      }
      const s0 = Math.sqrt(var0 + this.eps);
      const s1v = Math.sqrt(var1 + this.eps);
      const s2v = Math.sqrt(var2 + this.eps);
      s[ch * 3] = s0;
      s[ch * 3 + 1] = s1v;
      s[ch * 3 + 2] = s2v;
      const term0 = (F_HAT[0] * (1 - mu0)) / s0;
      const g = this.gamma[ch];
      const b = this.beta[ch];
      for (let sN = 0; sN < n; sN++) {
        const base = (sN * c + ch) * plane;
        for (let p = 0; p < plane; p++) {
          const v = xd[base + p];
          const h1 = (v - mu1) / s1v;
          const h2 = ((v * v - 1) / Math.SQRT2 - mu2) / s2v;
          xhat1[base + p] = h1;
          xhat2[base + p] = h2;
          const uv = term0 + F_HAT[1] * h1 + F_HAT[2] * h2;
          u[base + p] = uv;
          od[base + p] = g * uv + b;
        }
      }
    }
    this.x = x;
    this.xhat1 = xhat1;
    this.xhat2 = xhat2;
    this.u = u;
    this.s = s;
    this.trained = training;
    return out;
  }

  backward(g: Batch): Batch {
    if (!this.trained) throw new Error("backward after inference forward");
    const x = this.x!;
    const { n, c, h, w } = x;
    const plane = h * w;
    const m = n * plane;
    const gd = g.data;
    const xd = x.data;
    const dx = batchOf(n, c, h, w);
    const dd = dx.data;
    for (let ch = 0; ch < c; ch++) {
      const gch = this.gamma[ch];
      const s1v = this.s![ch * 3 + 1];
      const s2v = this.s![ch * 3 + 2];
      // per-basis batchnorm backward needs a few reductions first
      let sumG = 0;
      let sumGU = 0;
      let sum1x = 0;
      let sum2x = 0;
      for (let sN = 0; sN < n; sN++) {
        const base = (sN * c + ch) * plane;
        for (let p = 0; p < plane; p++) {
          const gv = gd[base + p];
          sumG += gv;
          sumGU += gv * this.u![base + p];
          sum1x += gv * this.xhat1![base + p];
          sum2x += gv * this.xhat2![base + p];
        }
      }
      this.dbeta[ch] += sumG;
      this.dgamma[ch] += sumGU;
      const c1a = (F_HAT[1] * gch) / s1v;
      const c2a = (F_HAT[2] * gch) / s2v;
      const meanG = sumG / m;
      const mean1x = sum1x / m;
      const mean2x = sum2x / m;
      for (let sN = 0; sN < n; sN++) {
        const base = (sN * c + ch) * plane;
        for (let p = 0; p < plane; p++) {
          const gv = gd[base + p];
          const dt1 = c1a * (gv - meanG - this.xhat1![base + p] * mean1x);
          const dt2 = c2a * (gv - meanG - this.xhat2![base + p] * mean2x);
          // chain through the basis derivatives: d h1 = 1, d h2 = sqrt2 x
          dd[base + p] = dt1 + dt2 * Math.SQRT2 * xd[base + p];
        }
      }
    }
    return dx;
  }
}

// ---------------------------------------------------------------------------
// batchnorm + ReLU baseline
// ---------------------------------------------------------------------------

export class BnRelu implements Layer {
  readonly c: number;
  readonly eps = 1e-5;
  gamma: Float64Array;
  beta: Float64Array;
  runMu: Float64Array;
  runVar: Float64Array;
  private dgamma: Float64Array;
  private dbeta: Float64Array;
  private xhat: Float64Array | null = null;
  private mask: Uint8Array | null = null;
  private s: Float64Array | null = null;

  constructor(c: number) {
    this.c = c;
    this.gamma = new Float64Array(c).fill(1);
    this.beta = new Float64Array(c);
    this.runMu = new Float64Array(c);
    this.runVar = new Float64Array(c).fill(1);
    this.dgamma = new Float64Array(c);
    this.dbeta = new Float64Array(c);
  }

  params(): Param[] {
    return [
      { value: this.gamma, grad: this.dgamma },
      { value: this.beta, grad: this.dbeta },
    ];
  }

  forward(x: Batch, training: boolean): Batch {
    const { n, c, h, w } = x;
    const plane = h * w;
    const m = n * plane;
    const xd = x.data;
    const out = batchOf(n, c, h, w);
    const od = out.data;
    const xhat = new Float64Array(n * c * plane);
    const mask = new Uint8Array(n * c * plane);
    const s = new Float64Array(c);
    for (let ch = 0; ch < c; ch++) {
      let mu: number;
      let v: number;
      if (training) {
        let sum = 0;
        let sq = 0;
        for (let sN = 0; sN < n; sN++) {
          const base = (sN * c + ch) * plane;
          for (let p = 0; p < plane; p++) {
            sum += xd[base + p];
            sq += xd[base + p] * xd[base + p];
          }
        }
        mu = sum / m;
        v = Math.max(sq / m - mu * mu, 0);
        this.runMu[ch] += MOMENTUM * (mu - this.runMu[ch]);
        this.runVar[ch] += MOMENTUM * (v - this.runVar[ch]);
      } else {
        mu = this.runMu[ch];
        v = this.runVar[ch];
      }
      const sv = Math.sqrt(v + this.eps);
      s[ch] = sv;
      const g = this.gamma[ch];
      const b = this.beta[ch];
      for (let sN = 0; sN < n; sN++) {
        const base = (sN * c + ch) * plane;
        for (let p = 0; p < plane; p++) {
          const xh = (xd[base + p] - mu) / sv;
          xhat[base + p] = xh;
          const y = g * xh + b;
          mask[base + p] = y > 0 ? 1 : 0;
          od[base + p] = y > 0 ? y : 0;
        }
      }
    }
    this.xhat = xhat;
    this.mask = mask;
    this.s = s;
    return out;
  }

  backward(g: Batch): Batch {
    const { n, c, h, w } = g;
    const plane = h * w;
    const m = n * plane;
    const gd = g.data;
    const dx = batchOf(n, c, h, w);
    const dd = dx.data;
    for (let ch = 0; ch < c; ch++) {
      let sumZ = 0;
      let sumZX = 0;
      for (let sN = 0; sN < n; sN++) {
        const base = (sN * c + ch) * plane;
        for (let p = 0; p < plane; p++) {
          const z = this.mask![base + p] ? gd[base + p] : 0;
          sumZ += z;
          sumZX += z * this.xhat![base + p];
        }
      }
      this.dbeta[ch] += sumZ;
      this.dgamma[ch] += sumZX;
      const coef = this.gamma[ch] / this.s![ch];
      const meanZ = sumZ / m;
      const meanZX = sumZX / m;
      for (let sN = 0; sN < n; sN++) {
        const base = (sN * c + ch) * plane;
        for (let p = 0; p < plane; p++) {
          const z = this.mask![base + p] ? gd[base + p] : 0;
          dd[base + p] = coef * (z - meanZ - this.xhat![base + p] * meanZX);
        }
      }
    }
    return dx;
  }
}

// ---------------------------------------------------------------------------
// pooling and dense head
// ---------------------------------------------------------------------------

export class GlobalAvgPool implements Layer {
  private hw = 0;
  private h = 0;
  private w = 0;

  params(): Param[] {
    return [];
  }

  forward(x: Batch, _training: boolean): Batch {
    const { n, c, h, w } = x;
    this.h = h;
    this.w = w;
    this.hw = h * w;
    const out = batchOf(n, c, 1, 1);
    for (let s = 0; s < n; s++) {
      for (let ch = 0; ch < c; ch++) {
        const base = (s * c + ch) * this.hw;
        let acc = 0;
        for (let p = 0; p < this.hw; p++) acc += x.data[base + p];
        out.data[s * c + ch] = acc / this.hw;
      }
    }
    return out;
  }

  backward(g: Batch): Batch {
    const { n, c } = g;
    const dx = batchOf(n, c, this.h, this.w);
    for (let s = 0; s < n; s++) {
      for (let ch = 0; ch < c; ch++) {
        const gv = g.data[s * c + ch] / this.hw;
        const base = (s * c + ch) * this.hw;
        for (let p = 0; p < this.hw; p++) dx.data[base + p] = gv;
      }
    }
    return dx;
  }
}

export class Linear implements Layer {
  readonly inC: number;
  readonly outC: number;
  w: Float64Array; // [outC][inC]
  b: Float64Array;
  private dw: Float64Array;
  private db: Float64Array;
  private x: Batch | null = null;

  constructor(inC: number, outC: number, rng: Rng) {
    this.inC = inC;
    this.outC = outC;
    const bound = Math.sqrt(3 / inC);
    this.w = new Float64Array(outC * inC);
    for (let i = 0; i < this.w.length; i++) {
      this.w[i] = rng.uniform(-bound, bound);
    }
    this.b = new Float64Array(outC);
    this.dw = new Float64Array(this.w.length);
    this.db = new Float64Array(outC);
  }

  params(): Param[] {
    return [
      { value: this.w, grad: this.dw },
      { value: this.b, grad: this.db },
    ];
  }

  forward(x: Batch, _training: boolean): Batch {
    this.x = x;
    const { n } = x;
    const out = batchOf(n, this.outC, 1, 1);
    for (let s = 0; s < n; s++) {
      for (let o = 0; o < this.outC; o++) {
        let acc = this.b[o];
        for (let i = 0; i < this.inC; i++) {
          acc += this.w[o * this.inC + i] * x.data[s * this.inC + i];
        }
        out.data[s * this.outC + o] = acc;
      }
    }
    return out;
  }

  backward(g: Batch): Batch {
    const x = this.x!;
    const { n } = g;
    const dx = batchOf(n, this.inC, 1, 1);
    for (let s = 0; s < n; s++) {
      for (let o = 0; o < this.outC; o++) {
        const gv = g.data[s * this.outC + o];
        this.db[o] += gv;
        for (let i = 0; i < this.inC; i++) {
          this.dw[o * this.inC + i] += gv * x.data[s * this.inC + i];
          dx.data[s * this.inC + i] += gv * this.w[o * this.inC + i];
        }
      }
    }
    return dx;
  }
}

// ---------------------------------------------------------------------------
// loss and optimizer
// ---------------------------------------------------------------------------

/** Mean softmax cross-entropy; writes d loss/d logits into grad. */
export function crossEntropy(logits: Batch, labels: Int32Array,
                             offset: number, grad: Batch): number {
  const { n, c } = logits;
  let loss = 0;
  for (let s = 0; s < n; s++) {
    const base = s * c;
    let mx = -Infinity;
    for (let i = 0; i < c; i++) mx = Math.max(mx, logits.data[base + i]);
    let z = 0;
    for (let i = 0; i < c; i++) z += Math.exp(logits.data[base + i] - mx);
    const y = labels[offset + s];
    loss += Math.log(z) + mx - logits.data[base + y];
    for (let i = 0; i < c; i++) {
      const p = Math.exp(logits.data[base + i] - mx) / z;
      grad.data[base + i] = (p - (i === y ? 1 : 0)) / n;
    }
  }
  return loss / n;
}

export class Sgd {
  lr: number;
  private readonly vel: Float64Array[];

  constructor(readonly params: Param[], lr: number,
              readonly momentum = 0.9) {
    this.lr = lr;
    this.vel = params.map((p) => new Float64Array(p.value.length));
  }

  zeroGrad(): void {
    for (const p of this.params) p.grad.fill(0);
  }

  step(): void {
    for (let i = 0; i < this.params.length; i++) {
      const { value, grad } = this.params[i];
      const v = this.vel[i];
      for (let j = 0; j < value.length; j++) {
        v[j] = this.momentum * v[j] - this.lr * grad[j];
        value[j] += v[j];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// the tiny-cnn in both variants
// ---------------------------------------------------------------------------

export type Variant = "aespa" | "relu-bn";

export const CHANNELS = [8, 16, 16] as const;
export const CLASSES = 10;

export class Model {
  readonly variant: Variant;
  readonly layers: Layer[];
  readonly convs: Conv2d[];
  readonly acts: (AespaAct | BnRelu)[];
  readonly fc: Linear;

  constructor(variant: Variant, rng: Rng) {
    this.variant = variant;
    const act = (c: number) =>
      variant === "aespa" ? new AespaAct(c) : new BnRelu(c);
    // both variants consume identical rng draws: acts draw nothing
    this.convs = [
      new Conv2d(1, CHANNELS[0], rng),
      new Conv2d(CHANNELS[0], CHANNELS[1], rng),
      new Conv2d(CHANNELS[1], CHANNELS[2], rng),
    ];
    this.acts = [act(CHANNELS[0]), act(CHANNELS[1])];
    this.fc = new Linear(CHANNELS[2], CLASSES, rng);
    this.layers = [
      this.convs[0], this.acts[0],
      this.convs[1], this.acts[1],
      this.convs[2],
      new GlobalAvgPool(),
      this.fc,
    ];
  }

  params(): Param[] {
    return this.layers.flatMap((l) => l.params());
  }

  forward(x: Batch, training: boolean): Batch {
    let t = x;
    for (const layer of this.layers) t = layer.forward(t, training);
    return t;
  }

  backward(g: Batch): void {
    let t = g;
    for (let i = this.layers.length - 1; i >= 0; i--) {
      t = this.layers[i].backward(t);
    }
  }
}
