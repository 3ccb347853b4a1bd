/**
 * The toy decoder-only transformer, mirroring the inference engine's
 * architecture exactly: pre-RMSNorm, causal multi-head attention, SwiGLU
 * FFN, residual connections, tied embedding, no biases. Seven linear
 * operators per layer (q, k, v, o, gate, up, down); sparse mode inserts a
 * Top-K mask at every operator's input.
 */

import * as tf from "@tensorflow/tfjs";

import {
  ContainerModel,
  ModelSpec,
  OP_ORDER,
  OpName,
  TensorData,
  opShape,
  tensorKey,
} from "./container.js";
import { hardMask, steTopk } from "./ste.js";

const RMS_EPS = 1e-6;

export interface ForwardOptions {
  /** Masked-out fraction of each operator's input channels; dense if absent. */
  sparsity?: number;
  /** Straight-through gradients through the masks (training mode). */
  ste?: boolean;
}

function rmsNorm(x: tf.Tensor): tf.Tensor {
  const ms = tf.mean(tf.square(x), -1, true);
  return tf.div(x, tf.sqrt(tf.add(ms, RMS_EPS)));
}

function silu(x: tf.Tensor): tf.Tensor {
  return tf.mul(x, tf.sigmoid(x));
}

export class ToyTransformer {
  readonly spec: ModelSpec;
  readonly embedding: tf.Variable; // (vocab, hidden)
  readonly weights: Map<string, tf.Variable>; // (out, in), row-major

  constructor(spec: ModelSpec, embedding: tf.Variable, weights: Map<string, tf.Variable>) {
    this.spec = spec;
    this.embedding = embedding;
    this.weights = weights;
  }

  static init(spec: ModelSpec, weightScale: number): ToyTransformer {
    const emb = tf.variable(
      tf.randomNormal([spec.vocab_size, spec.hidden_dim], 0, 1, "float32", spec.seed),
    );
    const weights = new Map<string, tf.Variable>();
    const std = weightScale / Math.sqrt(spec.hidden_dim);
    let salt = 1;
    for (let layer = 0; layer < spec.n_layers; layer++) {
      for (const op of OP_ORDER) {
        const [rows, cols] = opShape(spec, op);
        weights.set(
          tensorKey(layer, op),
          tf.variable(tf.randomNormal([rows, cols], 0, std, "float32", spec.seed + salt)),
        );
        salt += 1;
      }
    }
    return new ToyTransformer(spec, emb, weights);
  }

  static fromContainer(model: ContainerModel): ToyTransformer {
    const emb = tf.variable(
      tf.tensor(model.embedding, [model.spec.vocab_size, model.spec.hidden_dim]),
    );
    const weights = new Map<string, tf.Variable>();
    for (let layer = 0; layer < model.spec.n_layers; layer++) {
      for (const op of OP_ORDER) {
        const t = model.tensors.get(tensorKey(layer, op))!;
        weights.set(tensorKey(layer, op), tf.variable(tf.tensor(t.data, [t.rows, t.cols])));
      }
    }
    return new ToyTransformer(model.spec, emb, weights);
  }

  toContainer(): ContainerModel {
    const tensors = new Map<string, TensorData>();
    for (let layer = 0; layer < this.spec.n_layers; layer++) {
      for (const op of OP_ORDER) {
        const v = this.weights.get(tensorKey(layer, op))!;
        const [rows, cols] = v.shape as [number, number];
        tensors.set(tensorKey(layer, op), {
          rows,
          cols,
          data: v.dataSync() as Float32Array,
        });
      }
    }
    return {
      spec: { ...this.spec, dtype: "f32" },
      embedding: this.embedding.dataSync() as Float32Array,
      tensors,
    };
  }

  clone(): ToyTransformer {
    const emb = tf.variable(this.embedding.clone());
    const weights = new Map<string, tf.Variable>();
    for (const [key, v] of this.weights) weights.set(key, tf.variable(v.clone(), true));
    return new ToyTransformer(this.spec, emb, weights);
  }

  trainableVariables(): tf.Variable[] {
    return [this.embedding, ...this.weights.values()];
  }

  dispose(): void {
    this.embedding.dispose();
    for (const v of this.weights.values()) v.dispose();
  }

  private maskInput(x: tf.Tensor, opts: ForwardOptions): tf.Tensor {
    if (opts.sparsity === undefined) return x;
    return opts.ste ? steTopk(x, opts.sparsity) : hardMask(x, opts.sparsity);
  }

  private apply(layer: number, op: OpName, x: tf.Tensor, opts: ForwardOptions): tf.Tensor {
    // flatten leading dims: broadcasting matMul has no gradient for the
    // non-batched operand in tfjs
    const w = this.weights.get(tensorKey(layer, op))!;
    const masked = this.maskInput(x, opts);
    const shape = masked.shape;
    const flat = masked.reshape([-1, shape[shape.length - 1]]);
    const out = tf.matMul(flat, w, false, true);
    return out.reshape([...shape.slice(0, -1), w.shape[0] as number]);
  }

  /** tokens (batch, seq) int32 -> logits (batch, seq, vocab). */
  forward(tokens: tf.Tensor, opts: ForwardOptions = {}): tf.Tensor {
    const { n_layers, n_heads, hidden_dim, vocab_size } = this.spec;
    const headDim = hidden_dim / n_heads;
    const [batch, seq] = tokens.shape as [number, number];
    const causal = tf.tidy(() => {
      const ones = tf.ones([seq, seq]);
      const lower = tf.linalg.bandPart(ones, -1, 0);
      return tf.mul(tf.sub(1, lower), -1e9);
    });

    let x = tf.gather(this.embedding, tokens.cast("int32").reshape([batch * seq]))
      .reshape([batch, seq, hidden_dim]);
    for (let layer = 0; layer < n_layers; layer++) {
      const a = rmsNorm(x);
      const toHeads = (t: tf.Tensor) =>
        t.reshape([batch, seq, n_heads, headDim]).transpose([0, 2, 1, 3]);
      const q = toHeads(this.apply(layer, "q", a, opts));
      const k = toHeads(this.apply(layer, "k", a, opts));
      const v = toHeads(this.apply(layer, "v", a, opts));
      const scores = tf.add(
        tf.div(tf.matMul(q, k, false, true), Math.sqrt(headDim)),
        causal,
      );
      const ctx = tf
        .matMul(tf.softmax(scores), v)
        .transpose([0, 2, 1, 3])
        .reshape([batch, seq, hidden_dim]);
      x = tf.add(x, this.apply(layer, "o", ctx, opts));
      const f = rmsNorm(x);
      const g = this.apply(layer, "gate", f, opts);
      const u = this.apply(layer, "up", f, opts);
      const h = tf.mul(silu(g), u);
      x = tf.add(x, this.apply(layer, "down", h, opts));
    }
    return tf.matMul(x.reshape([batch * seq, hidden_dim]), this.embedding, false, true)
      .reshape([batch, seq, vocab_size]);
  }
}
