/**
 * Command-line entry: train both variants, report accuracies, write
 * the weights bundle and a metrics file.
 *
 *   node dist/cli.js --seed 0 --epochs 12 --out out/tiny-cnn-trained.json
 *
 * Exit codes: 0 success, 1 bad usage, 2 training diverged.
 */

import { mkdirSync, writeFileSync } from "node:fs";
import { dirname } from "node:path";
import { fileURLToPath } from "node:url";

import { weightsDigest } from "./export.js";
import { DEFAULTS, DivergenceError, TrainConfig, trainBoth } from "./train.js";

interface CliOptions extends TrainConfig {
  out: string;
  metricsOut: string;
}

const FLAGS: Record<string, keyof CliOptions> = {
  "--seed": "seed",
  "--epochs": "epochs",
  "--batch": "batch",
  "--lr": "lr",
  "--train-size": "trainSize",
  "--test-size": "testSize",
  "--noise": "noise",
  "--golden-count": "goldenCount",
  "--out": "out",
  "--metrics-out": "metricsOut",
};

const INT_FLAGS = new Set(["seed", "epochs", "batch", "trainSize",
                           "testSize", "goldenCount"]);

function usage(): never {
  const lines = ["usage: cli.js [options]", ""];
  for (const flag of Object.keys(FLAGS)) lines.push(`  ${flag} VALUE`);
  console.error(lines.join("\n"));
  process.exit(1);
}

export function parseArgs(argv: string[]): CliOptions {
  const opts: CliOptions = {
    ...DEFAULTS,
    out: "out/tiny-cnn-trained.json",
    metricsOut: "out/metrics.json",
  };
  for (let i = 0; i < argv.length; i += 2) {
    const key = FLAGS[argv[i]];
    if (key === undefined || i + 1 >= argv.length) usage();
    const raw = argv[i + 1];
    if (key === "out" || key === "metricsOut") {
      opts[key] = raw;
      continue;
    }
    const value = INT_FLAGS.has(key) ? parseInt(raw, 10) : parseFloat(raw);
    if (!Number.isFinite(value)) usage();
    (opts as unknown as Record<string, number>)[key] = value;
  }
  return opts;
}

function main(): void {
  const opts = parseArgs(process.argv.slice(2));
  const started = Date.now();
  let outcome;
  try {
    outcome = trainBoth(opts);
  } catch (err) {
    if (err instanceof DivergenceError) {
      console.error(`diverged: ${err.message}`);
      process.exit(2);
    }
    throw err;
  }
  const digest = weightsDigest(outcome.bundle);
  const metrics = {
    acc_relu: outcome.accRelu,
    acc_aespa: outcome.accAespa,
  };
  mkdirSync(dirname(opts.out), { recursive: true });
  writeFileSync(opts.out, JSON.stringify(outcome.bundle, null, 2) + "\n");
  mkdirSync(dirname(opts.metricsOut), { recursive: true });
  writeFileSync(opts.metricsOut, JSON.stringify(metrics, null, 2) + "\n");
  const secs = ((Date.now() - started) / 1000).toFixed(1);
  console.log(`acc relu-bn ${(100 * outcome.accRelu).toFixed(2)}%  ` +
              `aespa ${(100 * outcome.accAespa).toFixed(2)}%`);
  console.log(`weights ${opts.out}  digest ${digest.slice(0, 16)}...`);
  console.log(`metrics ${opts.metricsOut}  (${secs}s)`);
}

if (process.argv[1] && fileURLToPath(import.meta.url) === process.argv[1]) {
  main();
}
