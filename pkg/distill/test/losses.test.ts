import * as tf from "@tensorflow/tfjs";
import { describe, expect, it } from "vitest";

import {
  batchOutputs,
  ceLoss,
  ceScalar,
  gammaAuto,
  kldLoss,
  kldScalar,
  sdLoss,
  sdLossScalar,
} from "../src/losses.js";
import { mulberry32 } from "../src/rng.js";

function randomDistribution(rng: () => number, n: number): number[] {
  const raw = Array.from({ length: n }, () => -Math.log(rng() + 1e-12));
  const s = raw.reduce((a, b) => a + b, 0);
  return raw.map((v) => v / s);
}

describe("scalar reference losses", () => {
  it("KLD(P, P) = 0", () => {
    const p = [0.2, 0.3, 0.5];
    expect(kldScalar(p, p)).toBeCloseTo(0, 12);
  });

  it("KLD([1,0], [0.5,0.5]) = ln 2 within 1e-9", () => {
    expect(Math.abs(kldScalar([1, 0], [0.5, 0.5]) - Math.LN2)).toBeLessThan(1e-9);
  });

  it("KLD is non-negative on 1000 random pairs", () => {
    const rng = mulberry32(7);
    for (let i = 0; i < 1000; i++) {
      const n = 2 + Math.floor(rng() * 16);
      const p = randomDistribution(rng, n);
      const q = randomDistribution(rng, n);
      expect(kldScalar(p, q)).toBeGreaterThanOrEqual(-1e-12);
    }
  });

  it("rejects non-normalized distributions", () => {
    expect(() => kldScalar([0.5, 0.2], [0.5, 0.5])).toThrow();
    expect(() => ceScalar(0, [0.9, 0.3])).toThrow();
  });

  it("sd loss is the exact convex combination", () => {
    const kld = 0.431;
    const ce = 1.77;
    expect(sdLossScalar(kld, ce, 1)).toBe(kld);
    expect(sdLossScalar(kld, ce, 0)).toBe(ce);
    expect(Math.abs(sdLossScalar(kld, ce, 0.5) - (kld + ce) / 2)).toBeLessThan(1e-12);
    const g = 0.37;
    expect(Math.abs(sdLossScalar(kld, ce, g) - (g * kld + (1 - g) * ce))).toBeLessThan(1e-12);
    expect(() => sdLossScalar(kld, ce, 1.5)).toThrow();
  });

  it("gamma schedule hits the stated limits", () => {
    expect(gammaAuto(0)).toBe(1);
    expect(gammaAuto(1)).toBe(0);
    expect(gammaAuto(0.3)).toBeCloseTo(0.7, 12);
  });
});

describe("tensor losses against the scalar reference", () => {
  it("kldLoss matches kldScalar on random logit pairs", () => {
    const rng = mulberry32(21);
    for (let trial = 0; trial < 20; trial++) {
      const n = 3 + Math.floor(rng() * 10);
      const a = Array.from({ length: n }, () => rng() * 6 - 3);
      const b = Array.from({ length: n }, () => rng() * 6 - 3);
      const got = kldLoss(tf.tensor([a]), tf.tensor([b])).dataSync()[0];
      const softmax = (z: number[]) => {
        const m = Math.max(...z);
        const e = z.map((v) => Math.exp(v - m));
        const s = e.reduce((x, y) => x + y, 0);
        return e.map((v) => v / s);
      };
      const expected = kldScalar(softmax(a), softmax(b));
      expect(Math.abs(got - expected)).toBeLessThan(1e-5 * Math.max(1, expected));
    }
  });

  it("ceLoss matches ceScalar on hard labels", () => {
    const logits = [[2.0, -1.0, 0.5], [0.1, 0.2, 0.3]];
    const labels = [0, 2];
    const got = ceLoss(tf.tensor(labels, [2], "int32"), tf.tensor(logits)).dataSync()[0];
    const softmax = (z: number[]) => {
      const m = Math.max(...z);
      const e = z.map((v) => Math.exp(v - m));
      const s = e.reduce((x, y) => x + y, 0);
      return e.map((v) => v / s);
    };
    const expected =
      (ceScalar(0, softmax(logits[0])) + ceScalar(2, softmax(logits[1]))) / 2;
    expect(Math.abs(got - expected)).toBeLessThan(1e-6);
  });

  it("batch outputs carry normalized distributions and hard labels", () => {
    const out = batchOutputs(tf.tensor([[2.0, -1.0, 0.5]]), tf.tensor([[0.1, 0.2, 0.3]]));
    const sums = Array.from(tf.sum(out.teacherProbs, -1).dataSync());
    for (const s_ of sums) expect(Math.abs(s_ - 1)).toBeLessThan(1e-6);
    expect(Array.from(out.teacherLabels.dataSync())).toEqual([0]);
    expect(Array.from(out.studentLabels.dataSync())).toEqual([2]);
  });

  it("sdLoss equals gamma*KLD + (1-gamma)*CE", () => {
    const t = tf.tensor([[1.0, 0.2, -0.4]]);
    const s = tf.tensor([[0.3, 0.1, 0.5]]);
    const labels = tf.tensor([0], [1], "int32");
    const kld = kldLoss(t, s).dataSync()[0];
    const ce = ceLoss(labels, s).dataSync()[0];
    for (const gamma of [0, 0.25, 0.5, 1]) {
      const got = sdLoss(t, s, labels, gamma).dataSync()[0];
      expect(Math.abs(got - (gamma * kld + (1 - gamma) * ce))).toBeLessThan(1e-6);
    }
    expect(() => sdLoss(t, s, labels, -0.1)).toThrow();
  });
});
