import { describe, expect, it } from "vitest";

import { IMG, makeDataset } from "../src/dataset.js";
import { Rng } from "../src/rng.js";

describe("makeDataset", () => {
  it("emits the declared shapes", () => {
    const ds = makeDataset(50, new Rng(3, "ds"));
    expect(ds.n).toBe(50);
    expect(ds.images.length).toBe(50 * IMG * IMG);
    expect(ds.labels.length).toBe(50);
  });

  it("balances the ten classes", () => {
    const ds = makeDataset(200, new Rng(4, "ds"));
    const counts = new Array(10).fill(0);
    for (let i = 0; i < ds.n; i++) counts[ds.labels[i]]++;
    for (const c of counts) expect(c).toBe(20);
  });

  it("is deterministic in the seed", () => {
    const a = makeDataset(64, new Rng(5, "ds"), 0.3);
    const b = makeDataset(64, new Rng(5, "ds"), 0.3);
    expect(Array.from(a.labels)).toEqual(Array.from(b.labels));
    expect(Array.from(a.images)).toEqual(Array.from(b.images));
    const c = makeDataset(64, new Rng(6, "ds"), 0.3);
    expect(Array.from(c.images)).not.toEqual(Array.from(a.images));
  });

  it("keeps pixels in the advertised range", () => {
    const ds = makeDataset(100, new Rng(7, "ds"), 0.5);
    for (const v of ds.images) {
      expect(v).toBeGreaterThanOrEqual(-1);
      expect(v).toBeLessThanOrEqual(1.6);
    }
  });

  it("varies samples within one class", () => {
    const ds = makeDataset(40, new Rng(8, "ds"));
    const byClass = new Map<number, number>();
    for (let i = 0; i < ds.n; i++) {
      if (!byClass.has(ds.labels[i])) byClass.set(ds.labels[i], i);
      else {
        const j = byClass.get(ds.labels[i])!;
        const a = ds.images.subarray(i * 64, i * 64 + 64);
        const b = ds.images.subarray(j * 64, j * 64 + 64);
        expect(Array.from(a)).not.toEqual(Array.from(b));
      }
    }
  });
});
