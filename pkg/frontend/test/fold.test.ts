import { describe, expect, it } from "vitest";

import { ChannelStats, activationValue, foldQuadratic } from "../src/hermite.js";
import { Rng } from "../src/rng.js";

function randomChannel(rng: Rng): ChannelStats {
  return {
    gamma: rng.uniform(0.5, 1.5),
    beta: rng.uniform(-1, 1),
    mu: [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
         rng.uniform(-0.5, 0.5)],
    sigma2: [rng.uniform(0.5, 2), rng.uniform(0.5, 2), rng.uniform(0.5, 2)],
    eps: 1e-5,
  };
}

function worstFoldError(ch: ChannelStats): number {
  const q = foldQuadratic(ch);
  let worst = 0;
  for (let k = 0; k <= 240; k++) {
    const x = -6 + k * 0.05;
    const diff = Math.abs(q.a * x * x + q.b * x + q.c -
                          activationValue(x, ch));
    worst = Math.max(worst, diff);
  }
  return worst;
}

describe("foldQuadratic", () => {
  it("agrees with the term-by-term form on random channels", () => {
    const rng = new Rng(7, "fold");
    for (let t = 0; t < 100; t++) {
      expect(worstFoldError(randomChannel(rng))).toBeLessThan(1e-9);
    }
  });

  it("handles the degenerate constant-basis statistics", () => {
    // the constant basis has zero variance; eps keeps the fold finite
    const ch: ChannelStats = {
      gamma: 1.1, beta: 0.3,
      mu: [1, 0.05, -0.02],
      sigma2: [0, 0.9, 1.1],
      eps: 1e-5,
    };
    expect(worstFoldError(ch)).toBeLessThan(1e-9);
    const q = foldQuadratic(ch);
    expect(Number.isFinite(q.a)).toBe(true);
    expect(Number.isFinite(q.c)).toBe(true);
  });

  it("folds unit statistics to the raw expansion coefficients", () => {
    const ch: ChannelStats = {
      gamma: 1, beta: 0,
      mu: [0, 0, 0],
      sigma2: [1, 1, 1],
      eps: 0,
    };
    const q = foldQuadratic(ch);
    expect(q.a).toBeCloseTo(1 / (2 * Math.sqrt(2 * Math.PI)), 14);
    expect(q.b).toBe(0.5);
    expect(q.c).toBeCloseTo(1 / Math.sqrt(2 * Math.PI) -
                            1 / (2 * Math.sqrt(2 * Math.PI)), 14);
  });
});
