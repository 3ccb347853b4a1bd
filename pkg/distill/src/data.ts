/** Character-level toy corpus and batching. */

import { mulberry32, randInt } from "./rng.js";

// A few paragraphs of plain prose; enough regularity for a 2-layer model
// to learn visible structure in a couple hundred steps.
export const CORPUS = (
  "the little engine sorted its weights one by one. the heavy weights " +
  "stayed on the shelf and the light weights rode in the cart. when the " +
  "cart was full the engine stopped and counted them again. " +
  "every morning the same channels woke up first. the engine learned " +
  "which channels were warm and kept them close, and the cold ones it " +
  "left sleeping on the shelf until they were called. " +
  "a reader came by and asked the engine how it chose. the engine said: " +
  "i watch the signals, the loud signals pick the weights, and the quiet " +
  "signals wait for another day. the reader wrote this down twice. " +
  "in the evening the engine packed the shelf in a new order, so that " +
  "friends who travel together sit together, and one long pull of the " +
  "cart brings the whole row at once. the shelf was happy, the cart was " +
  "fast, and the engine decoded on time. " +
  "the counting never stopped. the engine kept a small book of numbers, " +
  "one page per context, and started each page from zero. old pages it " +
  "did not trust, for every story wakes its own channels, and a new " +
  "story deserves a new count. "
).repeat(4);

export interface Encoded {
  data: Int32Array;
  charset: string[];
  vocabSize: number;
}

export function encodeCorpus(text: string, vocabSize: number): Encoded {
  const charset = [...new Set(text.split(""))].sort();
  if (charset.length > vocabSize) {
    throw new Error(`corpus needs ${charset.length} symbols, vocab holds ${vocabSize}`);
  }
  const index = new Map(charset.map((c, i) => [c, i]));
  const data = new Int32Array(text.length);
  for (let i = 0; i < text.length; i++) data[i] = index.get(text[i])!;
  return { data, charset, vocabSize };
}

export function splitHeldOut(data: Int32Array, fraction = 0.1): { train: Int32Array; heldOut: Int32Array } {
  const cut = Math.floor(data.length * (1 - fraction));
  return { train: data.subarray(0, cut), heldOut: data.subarray(cut) };
}

export interface Batch {
  inputs: Int32Array; // (batch * seqLen)
  targets: Int32Array;
  batch: number;
  seqLen: number;
}

export function sampleBatch(
  data: Int32Array,
  batch: number,
  seqLen: number,
  rng: () => number,
): Batch {
  const inputs = new Int32Array(batch * seqLen);
  const targets = new Int32Array(batch * seqLen);
  for (let b = 0; b < batch; b++) {
    const start = randInt(rng, 0, data.length - seqLen - 1);
    for (let t = 0; t < seqLen; t++) {
      inputs[b * seqLen + t] = data[start + t];
      targets[b * seqLen + t] = data[start + t + 1];
    }
  }
  return { inputs, targets, batch, seqLen };
}

export const seededRng = mulberry32;
