/**
 * A small local digit set: 8x8 glyphs jittered, rescaled and noised.
 *
 * Entirely procedural so runs are deterministic and nothing is fetched.
 * The task is easy enough for a tiny CNN to clear 95% but hard enough
 * (noise, sub-glyph shifts) that an untrained or broken model does not.
 */

import { Rng } from "./rng.js";

const GLYPHS: readonly string[][] = [
  [
    "..####..",
    ".##..##.",
    ".##.###.",
    ".###.##.",
    ".##..##.",
    ".##..##.",
    "..####..",
    "........",
  ],
  [
    "...##...",
    "..###...",
    "...##...",
    "...##...",
    "...##...",
    "...##...",
    ".######.",
    "........",
  ],
  [
    "..####..",
    ".##..##.",
    ".....##.",
    "....##..",
    "..##....",
    ".##.....",
    ".######.",
    "........",
  ],
  [
    "..####..",
    ".##..##.",
    ".....##.",
    "...###..",
    ".....##.",
    ".##..##.",
    "..####..",
    "........",
  ],
  [
    "....##..",
    "...###..",
    "..####..",
    ".##.##..",
    ".######.",
    "....##..",
    "....##..",
    "........",
  ],
  [
    ".######.",
    ".##.....",
    ".#####..",
    ".....##.",
    ".....##.",
    ".##..##.",
    "..####..",
    "........",
  ],
  [
    "..####..",
    ".##.....",
    ".#####..",
    ".##..##.",
    ".##..##.",
    ".##..##.",
    "..####..",
    "........",
  ],
  [
    ".######.",
    ".....##.",
    "....##..",
    "...##...",
    "..##....",
    "..##....",
    "..##....",
    "........",
  ],
  [
    "..####..",
    ".##..##.",
    "..####..",
    ".##..##.",
    ".##..##.",
    ".##..##.",
    "..####..",
    "........",
  ],
  [
    "..####..",
    ".##..##.",
    ".##..##.",
    "..#####.",
    ".....##.",
    ".....##.",
    "..####..",
    "........",
  ],
];

export const IMG = 8;

export interface Dataset {
  images: Float64Array; // [n][1][8][8] flattened, values around [-1, 1]
  labels: Int32Array;
  n: number;
}

function renderSample(label: number, rng: Rng, noise: number,
                      out: Float64Array, offset: number): void {
  const glyph = GLYPHS[label];
  const dy = rng.int(3) - 1;
  const dx = rng.int(3) - 1;
  const bright = rng.uniform(0.7, 1.3);
  for (let y = 0; y < IMG; y++) {
    for (let x = 0; x < IMG; x++) {
      const sy = y - dy;
      const sx = x - dx;
      let v = 0;
      if (sy >= 0 && sy < IMG && sx >= 0 && sx < IMG) {
        v = glyph[sy].charAt(sx) === "#" ? bright : 0;
      }
      v += noise * rng.normal();
      if (v < 0) v = 0;
      if (v > 1.3) v = 1.3;
      out[offset + y * IMG + x] = 2 * v - 1;
    }
  }
}

export function makeDataset(n: number, rng: Rng, noise = 0.25): Dataset {
  const images = new Float64Array(n * IMG * IMG);
  const labels = new Int32Array(n);
  const order: number[] = [];
  for (let i = 0; i < n; i++) order.push(i % 10);
  rng.shuffle(order);
  for (let i = 0; i < n; i++) {
    labels[i] = order[i];
    renderSample(order[i], rng, noise, images, i * IMG * IMG);
  }
  return { images, labels, n };
}
