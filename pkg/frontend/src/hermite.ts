/**
 * The degree-2 normalized Hermite expansion of ReLU and its channel fold.
 *
 * hbar_i are the probabilists' Hermite polynomials scaled to unit norm
 * under the standard gaussian; the expansion coefficients of ReLU in that
 * basis have closed forms: f0 = 1/sqrt(2 pi), f1 = 1/2, f2 = 1/(2 sqrt pi).
 * An activation channel normalizes each basis value with its own running
 * statistics and applies a learned affine transform; at inference the
 * whole thing collapses to one quadratic per channel.
 */

const SQRT2 = Math.SQRT2;

/** ReLU expansion coefficients through degree 2. */
export const F_HAT: readonly number[] = [
  1 / Math.sqrt(2 * Math.PI),
  0.5,
  1 / (2 * Math.sqrt(Math.PI)),
];

/** Unit-norm probabilists' Hermite polynomial, degrees 0..2. */
export function hbar(i: number, x: number): number {
  switch (i) {
    case 0:
      return 1;
    case 1:
      return x;
    case 2:
      return (x * x - 1) / SQRT2;
    default:
      throw new Error(`hbar degree ${i} out of range`);
  }
}

export interface ChannelStats {
  gamma: number;
  beta: number;
  mu: [number, number, number];
  sigma2: [number, number, number];
  eps: number;
}

/** Inference-form activation: normalized expansion, term by term. */
export function activationValue(x: number, ch: ChannelStats): number {
  let acc = 0;
  for (let i = 0; i < 3; i++) {
    acc += (F_HAT[i] * (hbar(i, x) - ch.mu[i])) /
      Math.sqrt(ch.sigma2[i] + ch.eps);
  }
  return ch.gamma * acc + ch.beta;
}

export interface Quad {
  a: number;
  b: number;
  c: number;
}

/** Collapse a channel to a x^2 + b x + c. */
export function foldQuadratic(ch: ChannelStats): Quad {
  const s0 = Math.sqrt(ch.sigma2[0] + ch.eps);
  const s1 = Math.sqrt(ch.sigma2[1] + ch.eps);
  const s2 = Math.sqrt(ch.sigma2[2] + ch.eps);
  const a = (ch.gamma * F_HAT[2]) / (SQRT2 * s2);
  const b = (ch.gamma * F_HAT[1]) / s1;
  const c =
    ch.gamma *
      ((F_HAT[0] * (1 - ch.mu[0])) / s0 -
        (F_HAT[1] * ch.mu[1]) / s1 -
        (F_HAT[2] * (1 / SQRT2 + ch.mu[2])) / s2) +
    ch.beta;
  return { a, b, c };
}
