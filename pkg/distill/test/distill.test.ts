import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { beforeAll, describe, expect, it } from "vitest";

import { writeContainer } from "../src/container.js";
import { CORPUS, encodeCorpus, splitHeldOut } from "../src/data.js";
import { ToyTransformer } from "../src/model.js";
import { distill, perplexity, trainDense, writeMetricsCsv } from "../src/train.js";

const SPEC = { n_layers: 2, hidden_dim: 32, ffn_dim: 64, n_heads: 2, vocab_size: 48, dtype: "f32", seed: 0 };
const SEQ = 24;
const BATCH = 8;

let teacher: ToyTransformer;
let train: Int32Array;
let heldOut: Int32Array;

function checksum(model: ToyTransformer): number {
  let sum = 0;
  for (const v of model.trainableVariables()) {
    const data = v.dataSync() as Float32Array;
    for (let i = 0; i < data.length; i += 7) sum += data[i];
  }
  return sum;
}

beforeAll(() => {
  const encoded = encodeCorpus(CORPUS, SPEC.vocab_size);
  const split = splitHeldOut(encoded.data);
  train = split.train as Int32Array;
  heldOut = split.heldOut as Int32Array;
  teacher = ToyTransformer.init(SPEC, 0.5);
  trainDense(teacher, train, 200, 0.01, BATCH, SEQ, 1);
});

describe("sparsity-aware self-distillation", () => {
  it("zero epochs leaves the student identical to the teacher", () => {
    const { student, metrics } = distill(teacher, train, heldOut, {
      spTrain: 0.7, gamma: "auto", learningRate: 1e-3, epochs: 0, stepsPerEpoch: 10,
      batchSize: BATCH, seqLen: SEQ, seed: 3, evalSparsities: [0.7],
    });
    expect(metrics).toEqual([]);
    for (const [key, v] of teacher.weights) {
      expect(Array.from(student.weights.get(key)!.dataSync())).toEqual(Array.from(v.dataSync()));
    }
    student.dispose();
  });

  it("improves held-out sparse perplexity at the training sparsity (median over 3 seeds)", () => {
    const sp = 0.7;
    const before = perplexity(teacher, heldOut, sp, SEQ);
    const after: number[] = [];
    for (const seed of [11, 12, 13]) {
      const { student, metrics } = distill(teacher, train, heldOut, {
        spTrain: sp, gamma: "auto", learningRate: 2e-3, epochs: 3, stepsPerEpoch: 25,
        batchSize: BATCH, seqLen: SEQ, seed, evalSparsities: [sp, 0.5],
      });
      after.push(perplexity(student, heldOut, sp, SEQ));
      expect(metrics).toHaveLength(3);
      expect(metrics.every((m) => Number.isFinite(m.loss))).toBe(true);
      student.dispose();
    }
    const median = after.slice().sort((a, b) => a - b)[1];
    expect(median).toBeLessThan(before);
  });

  it("one-distill-all-scale: lower eval sparsity never hurts the same weights", () => {
    // gentle updates: masked channels keep their teacher weights, so the
    // student must stay compatible with them when lower sparsity turns
    // them back on
    const { student } = distill(teacher, train, heldOut, {
      spTrain: 0.8, gamma: "auto", learningRate: 2e-4, epochs: 3, stepsPerEpoch: 25,
      batchSize: BATCH, seqLen: SEQ, seed: 21, evalSparsities: [0.8],
    });
    const atTrain = perplexity(student, heldOut, 0.8, SEQ);
    const atLower = perplexity(student, heldOut, 0.5, SEQ);
    expect(atLower).toBeLessThanOrEqual(atTrain);
    student.dispose();
  });

  it("never modifies the teacher", () => {
    const before = checksum(teacher);
    const { student } = distill(teacher, train, heldOut, {
      spTrain: 0.7, gamma: "auto", learningRate: 2e-3, epochs: 1, stepsPerEpoch: 10,
      batchSize: BATCH, seqLen: SEQ, seed: 5, evalSparsities: [0.7],
    });
    expect(checksum(teacher)).toBe(before);
    student.dispose();
  });

  it("aborts on divergence instead of emitting NaN weights", () => {
    expect(() =>
      distill(teacher, train, heldOut, {
        spTrain: 0.7, gamma: "auto", learningRate: 1e6, epochs: 1, stepsPerEpoch: 10,
        batchSize: BATCH, seqLen: SEQ, seed: 5, evalSparsities: [0.7],
      }),
    ).toThrow(/diverged/);
  });

  it("supports corpus labels for the CE term", () => {
    const { student, metrics } = distill(teacher, train, heldOut, {
      spTrain: 0.7, gamma: "auto", learningRate: 2e-3, epochs: 1, stepsPerEpoch: 10,
      batchSize: BATCH, seqLen: SEQ, seed: 7, evalSparsities: [0.7], ceTarget: "corpus",
    });
    expect(metrics[0].loss).toBeGreaterThan(0);
    expect(Number.isFinite(metrics[0].ppl["0.70"])).toBe(true);
    student.dispose();
  });

  it("writes per-epoch metrics with perplexity columns", () => {
    const { metrics } = distill(teacher, train, heldOut, {
      spTrain: 0.7, gamma: "auto", learningRate: 2e-3, epochs: 2, stepsPerEpoch: 5,
      batchSize: BATCH, seqLen: SEQ, seed: 6, evalSparsities: [0.7, 0.5],
    });
    const dir = mkdtempSync(join(tmpdir(), "distill-metrics-"));
    const path = join(dir, "metrics.csv");
    writeMetricsCsv(metrics, path);
    const text = readFileSync(path, "utf-8");
    expect(text.split("\n")[0]).toBe("epoch,loss,ppl@0.70,ppl@0.50");
    expect(text.trim().split("\n")).toHaveLength(3);
  });
});

describe("export into the inference engine", () => {
  it("distilled weights load and decode with finite logits through the full chain", () => {
    // a 4-layer model so the planner's double-buffer reserve is feasible
    const spec = { ...SPEC, n_layers: 4, n_heads: 2, seed: 2 };
    const mini = ToyTransformer.init(spec, 0.5);
    trainDense(mini, train, 30, 0.01, BATCH, SEQ, 2);
    const { student } = distill(mini, train, heldOut, {
      spTrain: 0.6, gamma: "auto", learningRate: 1e-3, epochs: 1, stepsPerEpoch: 5,
      batchSize: BATCH, seqLen: SEQ, seed: 8, evalSparsities: [0.6],
    });

    const dir = mkdtempSync(join(tmpdir(), "distill-export-"));
    const manifest = join(dir, "distilled.json");
    writeContainer(student.toContainer(), manifest);
    // flat table: preload already fits under compute, so the plan picks
    // group size 1, matching the packed store
    writeFileSync(join(dir, "profile.json"), JSON.stringify({
      bw_table: [[64, 4e9]],
      bw_mem: 8e9,
      req_latency_s: 1e-6,
    }));
    writeFileSync(join(dir, "prompt.csv"), "1,2,3\n");

    const sw = (...args: string[]) =>
      execFileSync("python3", ["-m", "swapflow", ...args], { cwd: dir });

    sw("pack", "--model", manifest, "--group-size", "1", "--out", join(dir, "store.awsp"));
    sw(
      "plan", "--model", manifest, "--profile", join(dir, "profile.json"),
      "--memory-budget", "120000", "--kv", "1024", "--out", join(dir, "plan.json"),
    );
    const planDoc = JSON.parse(readFileSync(join(dir, "plan.json"), "utf-8"));
    expect(planDoc.group_size).toBe(1);
    const out = sw(
      "run", "--store", join(dir, "store.awsp"), "--profile", join(dir, "profile.json"),
      "--plan", join(dir, "plan.json"), "--prompt-tokens", join(dir, "prompt.csv"),
      "--n-tokens", "4", "--mode", "sim", "--seed", "0", "--trace", join(dir, "trace.csv"),
    ).toString();
    expect(out).toContain("decoded 4 tokens");
    mini.dispose();
    student.dispose();
  });
});
