/**
 * Distillation losses.
 *
 * The scalar (float64) implementations are the reference: loss identities
 * are pinned against them at tight tolerances. The tensor versions drive
 * training and are cross-checked against the scalars in tests.
 *
 * An epsilon floor (1e-9) inside every log keeps the divergence defined
 * when a probability underflows to zero.
 */

import * as tf from "@tensorflow/tfjs";

export const EPS = 1e-9;

function checkDistribution(p: number[], name: string): void {
  const s = p.reduce((a, b) => a + b, 0);
  if (Math.abs(s - 1) > 1e-6) throw new Error(`${name} sums to ${s}, not 1`);
  if (p.some((v) => v < 0)) throw new Error(`${name} has negative entries`);
}

/** D_KL(P || Q) = sum_i P(i) log(P(i) / Q(i)); zero-P terms contribute 0. */
export function kldScalar(p: number[], q: number[]): number {
  if (p.length !== q.length) throw new Error("distribution lengths differ");
  checkDistribution(p, "P");
  checkDistribution(q, "Q");
  let out = 0;
  for (let i = 0; i < p.length; i++) {
    if (p[i] > 0) out += p[i] * Math.log(p[i] / Math.max(q[i], EPS));
  }
  return out;
}

/** Cross entropy of a hard label against a predicted distribution. */
export function ceScalar(label: number, q: number[]): number {
  checkDistribution(q, "Q");
  if (!(label >= 0 && label < q.length)) throw new Error(`label ${label} out of range`);
  return -Math.log(Math.max(q[label], EPS));
}

export function sdLossScalar(kld: number, ce: number, gamma: number): number {
  if (!(gamma >= 0 && gamma <= 1)) throw new Error(`gamma ${gamma} outside [0, 1]`);
  return gamma * kld + (1 - gamma) * ce;
}

/**
 * gamma from the target sparsity: high sparsity pushes the loss toward
 * hard-label cross entropy, low sparsity toward pure distribution
 * matching. A linear schedule is one admissible reading of that rule.
 */
export function gammaAuto(sparsity: number): number {
  return Math.min(1, Math.max(0, 1 - sparsity));
}

/** Mean D_KL(P_T || P_S) over positions. Logits in, softmax inside. */
export function kldLoss(teacherLogits: tf.Tensor, studentLogits: tf.Tensor): tf.Scalar {
  return tf.tidy(() => {
    const pT = tf.softmax(teacherLogits);
    const pS = tf.softmax(studentLogits);
    const terms = tf.mul(pT, tf.sub(tf.log(tf.add(pT, EPS)), tf.log(tf.add(pS, EPS))));
    return tf.mean(tf.sum(terms, -1)) as tf.Scalar;
  });
}

/** Mean cross entropy of teacher hard labels against student predictions. */
export function ceLoss(teacherLabels: tf.Tensor, studentLogits: tf.Tensor): tf.Scalar {
  return tf.tidy(() => {
    const logp = tf.logSoftmax(studentLogits);
    const vocab = studentLogits.shape[studentLogits.shape.length - 1] as number;
    const oneHot = tf.oneHot(teacherLabels.cast("int32"), vocab);
    const picked = tf.sum(tf.mul(oneHot, logp), -1);
    return tf.neg(tf.mean(picked)) as tf.Scalar;
  });
}

/** Per-position teacher/student distributions and hard outputs. */
export interface DistillBatchOutputs {
  teacherProbs: tf.Tensor;
  studentProbs: tf.Tensor;
  teacherLabels: tf.Tensor;
  studentLabels: tf.Tensor;
}

export function batchOutputs(teacherLogits: tf.Tensor, studentLogits: tf.Tensor): DistillBatchOutputs {
  return tf.tidy(() => {
    const teacherProbs = tf.softmax(teacherLogits);
    const studentProbs = tf.softmax(studentLogits);
    for (const [name, probs] of [["teacher", teacherProbs], ["student", studentProbs]] as const) {
      const sums = tf.sum(probs, -1);
      const worst = tf.max(tf.abs(tf.sub(sums, 1))).dataSync()[0];
      if (worst > 1e-6) throw new Error(`${name} distribution sums off by ${worst}`);
    }
    return {
      teacherProbs: tf.keep(teacherProbs),
      studentProbs: tf.keep(studentProbs),
      teacherLabels: tf.keep(tf.argMax(teacherLogits, -1)),
      studentLabels: tf.keep(tf.argMax(studentLogits, -1)),
    };
  });
}

export function sdLoss(
  teacherLogits: tf.Tensor,
  studentLogits: tf.Tensor,
  teacherLabels: tf.Tensor,
  gamma: number,
): tf.Scalar {
  if (!(gamma >= 0 && gamma <= 1)) throw new Error(`gamma ${gamma} outside [0, 1]`);
  return tf.tidy(() => {
    const kld = kldLoss(teacherLogits, studentLogits);
    const ce = ceLoss(teacherLabels, studentLogits);
    return tf.add(tf.mul(kld, gamma), tf.mul(ce, 1 - gamma)) as tf.Scalar;
  });
}
