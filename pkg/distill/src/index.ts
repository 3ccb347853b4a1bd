export {
  ContainerModel,
  ModelSpec,
  OP_ORDER,
  OpName,
  TensorData,
  opShape,
  readContainer,
  tensorKey,
  writeContainer,
} from "./container.js";
export { CORPUS, encodeCorpus, sampleBatch, seededRng, splitHeldOut } from "./data.js";
export {
  DistillBatchOutputs,
  EPS,
  batchOutputs,
  ceLoss,
  ceScalar,
  gammaAuto,
  kldLoss,
  kldScalar,
  sdLoss,
  sdLossScalar,
} from "./losses.js";
export { ForwardOptions, ToyTransformer } from "./model.js";
export { exactK, hardMask, steMask, steTopk, topkKeepMask } from "./ste.js";
export {
  DistillConfig,
  DistillResult,
  EpochMetrics,
  distill,
  perplexity,
  resolveGamma,
  trainDense,
  writeMetricsCsv,
} from "./train.js";
