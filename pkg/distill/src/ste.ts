/**
 * Top-K masking with a straight-through gradient.
 *
 * Forward: zero every feature whose |value| is outside the k largest of
 * its position (ties broken toward the lower index, matching the
 * inference engine). Backward: the upstream gradient passes through
 * unchanged, masked positions included, as if the mask were transparent.
 */

import * as tf from "@tensorflow/tfjs";

export function exactK(dim: number, sparsity: number): number {
  if (!(sparsity >= 0 && sparsity < 1)) throw new Error(`sparsity ${sparsity} outside [0, 1)`);
  return Math.max(1, Math.round((1 - sparsity) * dim));
}

/**
 * 0/1 keep-mask over the last axis: k largest magnitudes per position.
 * Computed outside the autograd graph; the mask is data, not a function
 * being differentiated.
 */
export function topkKeepMask(x: tf.Tensor, k: number): tf.Tensor {
  const dim = x.shape[x.shape.length - 1];
  if (!(k >= 1 && k <= dim)) throw new Error(`k=${k} out of range for dim ${dim}`);
  const flat = x.dataSync() as Float32Array;
  const rows = flat.length / dim;
  const mask = new Float32Array(flat.length);
  const order = new Array<number>(dim);
  for (let r = 0; r < rows; r++) {
    const base = r * dim;
    for (let i = 0; i < dim; i++) order[i] = i;
    // sort by descending magnitude; ties keep the lower index first
    order.sort((a, b) => {
      const d = Math.abs(flat[base + b]) - Math.abs(flat[base + a]);
      return d !== 0 ? d : a - b;
    });
    for (let j = 0; j < k; j++) mask[base + order[j]] = 1;
  }
  return tf.tensor(mask, x.shape as number[]);
}

/** y = x * mask forward; dy/dx = I backward (straight-through). */
export function steMask(x: tf.Tensor, mask: tf.Tensor): tf.Tensor {
  const op = tf.customGrad((input, save) => {
    const t = input as tf.Tensor;
    (save as tf.GradSaveFunc)([]);
    return {
      value: tf.mul(t, mask),
      gradFunc: (dy: tf.Tensor) => [dy],
    };
  });
  return op(x as tf.Tensor<tf.Rank>);
}

/** Masked forward without gradient bookkeeping (evaluation path). */
export function hardMask(x: tf.Tensor, sparsity: number): tf.Tensor {
  const dim = x.shape[x.shape.length - 1];
  const mask = topkKeepMask(x, exactK(dim, sparsity));
  return tf.mul(x, mask);
}

export function steTopk(x: tf.Tensor, sparsity: number): tf.Tensor {
  const dim = x.shape[x.shape.length - 1];
  const mask = topkKeepMask(x, exactK(dim, sparsity));
  return steMask(x, mask);
}
