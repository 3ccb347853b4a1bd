/**
 * Dense pretraining (to make a teacher) and Top-K sparsity-aware
 * self-distillation.
 *
 * Distillation freezes the dense teacher, initializes the student from it,
 * inserts straight-through Top-K masks at every linear operator input at
 * the target sparsity, and minimizes
 *
 *     gamma * KLD(P_teacher || P_student) + (1 - gamma) * CE(teacher argmax, student)
 *
 * Because one distillation at high sparsity transfers to lower sparsity
 * levels, each epoch also evaluates held-out perplexity at the training
 * sparsity and at the configured lower levels.
 */

import { writeFileSync } from "node:fs";

import * as tf from "@tensorflow/tfjs";

import { Batch, sampleBatch, seededRng } from "./data.js";
import { ceLoss, gammaAuto, sdLoss } from "./losses.js";
import { ToyTransformer } from "./model.js";

export interface DistillConfig {
  spTrain: number;
  gamma: number | "auto";
  learningRate: number;
  epochs: number;
  stepsPerEpoch: number;
  batchSize: number;
  seqLen: number;
  seed: number;
  /** Sparsity levels for the per-epoch held-out evaluation. */
  evalSparsities: number[];
  /** CE term target: the teacher's argmax tokens (default) or the corpus. */
  ceTarget?: "teacher" | "corpus";
}

export interface EpochMetrics {
  epoch: number;
  loss: number;
  ppl: Record<string, number>;
}

export function resolveGamma(config: DistillConfig): number {
  if (config.gamma === "auto") return gammaAuto(config.spTrain);
  if (!(config.gamma >= 0 && config.gamma <= 1)) {
    throw new Error(`gamma ${config.gamma} outside [0, 1]`);
  }
  return config.gamma;
}

function toTensors(batch: Batch): { inputs: tf.Tensor; targets: tf.Tensor } {
  return {
    inputs: tf.tensor(Array.from(batch.inputs), [batch.batch, batch.seqLen], "int32"),
    targets: tf.tensor(Array.from(batch.targets), [batch.batch, batch.seqLen], "int32"),
  };
}

/** Ordinary next-token cross-entropy training; used to build teachers. */
export function trainDense(
  model: ToyTransformer,
  data: Int32Array,
  steps: number,
  learningRate: number,
  batchSize: number,
  seqLen: number,
  seed: number,
): number {
  const rng = seededRng(seed);
  const opt = tf.train.adam(learningRate);
  let last = NaN;
  for (let step = 0; step < steps; step++) {
    const batch = sampleBatch(data, batchSize, seqLen, rng);
    const { inputs, targets } = toTensors(batch);
    const cost = opt.minimize(
      () => ceLoss(targets, model.forward(inputs)),
      true,
      model.trainableVariables(),
    )!;
    last = cost.dataSync()[0];
    tf.dispose([inputs, targets, cost]);
    if (!Number.isFinite(last)) throw new Error(`dense training diverged at step ${step}`);
  }
  opt.dispose();
  return last;
}

/** Held-out perplexity at a sparsity level (dense when null). */
export function perplexity(
  model: ToyTransformer,
  heldOut: Int32Array,
  sparsity: number | null,
  seqLen = 32,
): number {
  let nll = 0;
  let count = 0;
  for (let start = 0; start + seqLen + 1 <= heldOut.length; start += seqLen) {
    const window = heldOut.subarray(start, start + seqLen + 1);
    const value = tf.tidy(() => {
      const inputs = tf.tensor(Array.from(window.subarray(0, seqLen)), [1, seqLen], "int32");
      const targets = tf.tensor(Array.from(window.subarray(1)), [1, seqLen], "int32");
      const opts = sparsity === null ? {} : { sparsity };
      const logits = model.forward(inputs, opts);
      return ceLoss(targets, logits).dataSync()[0];
    });
    nll += value * seqLen;
    count += seqLen;
  }
  if (count === 0) throw new Error("held-out slice shorter than one window");
  return Math.exp(nll / count);
}

export interface DistillResult {
  student: ToyTransformer;
  metrics: EpochMetrics[];
  gamma: number;
}

export function distill(
  teacher: ToyTransformer,
  trainData: Int32Array,
  heldOut: Int32Array,
  config: DistillConfig,
): DistillResult {
  if (!(config.spTrain > 0 && config.spTrain < 1)) {
    throw new Error(`spTrain ${config.spTrain} outside (0, 1)`);
  }
  const gamma = resolveGamma(config);
  const student = teacher.clone();
  const metrics: EpochMetrics[] = [];
  if (config.epochs === 0) return { student, metrics, gamma };

  const rng = seededRng(config.seed);
  const opt = tf.train.adam(config.learningRate);
  for (let epoch = 0; epoch < config.epochs; epoch++) {
    let lossSum = 0;
    for (let step = 0; step < config.stepsPerEpoch; step++) {
      const batch = sampleBatch(trainData, config.batchSize, config.seqLen, rng);
      const { inputs, targets } = toTensors(batch);
      const teacherLogits = tf.tidy(() => model_forward_dense(teacher, inputs));
      const labels =
        (config.ceTarget ?? "teacher") === "teacher"
          ? tf.tidy(() => tf.argMax(teacherLogits, -1))
          : targets;
      const cost = opt.minimize(
        () =>
          sdLoss(
            teacherLogits,
            student.forward(inputs, { sparsity: config.spTrain, ste: true }),
            labels,
            gamma,
          ),
        true,
        student.trainableVariables(),
      )!;
      const value = cost.dataSync()[0];
      tf.dispose([inputs, targets, teacherLogits, labels, cost]);
      if (!Number.isFinite(value)) {
        opt.dispose();
        throw new Error(
          `distillation diverged at epoch ${epoch} step ${step}: loss ${value}`,
        );
      }
      lossSum += value;
    }
    const ppl: Record<string, number> = {};
    for (const sp of config.evalSparsities) {
      ppl[sp.toFixed(2)] = perplexity(student, heldOut, sp, config.seqLen);
    }
    metrics.push({ epoch, loss: lossSum / config.stepsPerEpoch, ppl });
  }
  opt.dispose();
  return { student, metrics, gamma };
}

function model_forward_dense(model: ToyTransformer, inputs: tf.Tensor): tf.Tensor {
  return model.forward(inputs);
}

export function writeMetricsCsv(metrics: EpochMetrics[], path: string): void {
  if (metrics.length === 0) {
    writeFileSync(path, "epoch,loss\n");
    return;
  }
  const levels = Object.keys(metrics[0].ppl);
  const header = ["epoch", "loss", ...levels.map((l) => `ppl@${l}`)].join(",");
  const lines = metrics.map((m) =>
    [m.epoch, m.loss, ...levels.map((l) => m.ppl[l])].join(","),
  );
  writeFileSync(path, header + "\n" + lines.join("\n") + "\n");
}
