/**
 * Config-driven entry point.
 *
 * Usage: node dist/main.js config.json
 *
 * Config schema (JSON):
 * {
 *   "teacher": "path/to/model.json",     // optional: pretrain one if absent
 *   "pretrain": {"steps": 300, "learningRate": 0.01},
 *   "out": "distilled.json",
 *   "metrics": "metrics.csv",
 *   "model": {"n_layers": 2, "hidden_dim": 32, "ffn_dim": 64,
 *             "n_heads": 2, "vocab_size": 48, "seed": 0},
 *   "distill": {"spTrain": 0.7, "gamma": "auto", "learningRate": 0.003,
 *               "epochs": 5, "stepsPerEpoch": 25, "batchSize": 8,
 *               "seqLen": 24, "seed": 0, "evalSparsities": [0.7, 0.5]}
 * }
 */

import { readFileSync } from "node:fs";

import { readContainer, writeContainer } from "./container.js";
import { CORPUS, encodeCorpus, splitHeldOut } from "./data.js";
import { ToyTransformer } from "./model.js";
import { distill, perplexity, trainDense, writeMetricsCsv } from "./train.js";

function main(): void {
  const configPath = process.argv[2];
  if (!configPath) {
    console.error("usage: node dist/main.js config.json");
    process.exit(2);
  }
  const config = JSON.parse(readFileSync(configPath, "utf-8"));
  const spec = { dtype: "f32", ...config.model };
  const encoded = encodeCorpus(CORPUS, spec.vocab_size);
  const { train, heldOut } = splitHeldOut(encoded.data);

  let teacher: ToyTransformer;
  if (config.teacher) {
    teacher = ToyTransformer.fromContainer(readContainer(config.teacher));
    console.log(`loaded teacher from ${config.teacher}`);
  } else {
    teacher = ToyTransformer.init(spec, 0.5);
    const pre = config.pretrain ?? { steps: 300, learningRate: 0.01 };
    const loss = trainDense(
      teacher, train, pre.steps, pre.learningRate,
      config.distill.batchSize, config.distill.seqLen, config.distill.seed,
    );
    console.log(`pretrained dense teacher: final loss ${loss.toFixed(4)}`);
  }

  const sp = config.distill.spTrain;
  const before = perplexity(teacher, heldOut, sp, config.distill.seqLen);
  console.log(`undistilled sparse perplexity @${sp}: ${before.toFixed(3)}`);

  const result = distill(teacher, train, heldOut, config.distill);
  const after = perplexity(result.student, heldOut, sp, config.distill.seqLen);
  console.log(`distilled sparse perplexity  @${sp}: ${after.toFixed(3)} (gamma ${result.gamma})`);

  writeContainer(result.student.toContainer(), config.out);
  console.log(`exported student to ${config.out}`);
  if (config.metrics) {
    writeMetricsCsv(result.metrics, config.metrics);
    console.log(`metrics at ${config.metrics}`);
  }
}

main();
