/**
 * Reader/writer for the swapflow model container: a JSON manifest plus one
 * little-endian raw binary payload. Operator tensors are serialized
 * channel-major (one input column at a time); the embedding is row-major.
 * Only f32 containers are supported here; quantization stays on the
 * inference side.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { basename, dirname, join } from "node:path";

export const OP_ORDER = ["q", "k", "v", "o", "gate", "up", "down"] as const;
export type OpName = (typeof OP_ORDER)[number];

export interface ModelSpec {
  n_layers: number;
  hidden_dim: number;
  ffn_dim: number;
  n_heads: number;
  vocab_size: number;
  dtype: string;
  seed: number;
}

/** One operator matrix, row-major (rows = output dim, cols = input dim). */
export interface TensorData {
  rows: number;
  cols: number;
  data: Float32Array;
}

export interface ContainerModel {
  spec: ModelSpec;
  embedding: Float32Array; // (vocab, hidden) row-major
  tensors: Map<string, TensorData>; // key `${layer}.${op}`
}

export function tensorKey(layer: number, op: OpName): string {
  return `${layer}.${op}`;
}

export function opShape(spec: ModelSpec, op: OpName): [number, number] {
  const { hidden_dim: h, ffn_dim: f } = spec;
  if (op === "gate" || op === "up") return [f, h];
  if (op === "down") return [h, f];
  return [h, h];
}

function channelMajorBytes(t: TensorData): Buffer {
  const buf = Buffer.alloc(t.rows * t.cols * 4);
  let off = 0;
  for (let c = 0; c < t.cols; c++) {
    for (let r = 0; r < t.rows; r++) {
      buf.writeFloatLE(t.data[r * t.cols + c], off);
      off += 4;
    }
  }
  return buf;
}

function tensorFromChannelMajor(raw: Buffer, rows: number, cols: number): TensorData {
  const data = new Float32Array(rows * cols);
  let off = 0;
  for (let c = 0; c < cols; c++) {
    for (let r = 0; r < rows; r++) {
      data[r * cols + c] = raw.readFloatLE(off);
      off += 4;
    }
  }
  return { rows, cols, data };
}

export function readContainer(manifestPath: string): ContainerModel {
  const manifest = JSON.parse(readFileSync(manifestPath, "utf-8"));
  if (manifest.format !== "swapflow-model") {
    throw new Error(`${manifestPath} is not a swapflow-model manifest`);
  }
  const spec: ModelSpec = manifest.spec;
  if (spec.dtype !== "f32") {
    throw new Error(`distillation consumes f32 containers, got ${spec.dtype}`);
  }
  const opTypes: string[] = manifest.spec.op_types ?? [...OP_ORDER];
  if (JSON.stringify(opTypes) !== JSON.stringify([...OP_ORDER])) {
    throw new Error("manifest operator order does not match the fixed op order");
  }
  const payload = readFileSync(join(dirname(manifestPath), manifest.payload));
  let embedding: Float32Array | null = null;
  const tensors = new Map<string, TensorData>();
  for (const entry of manifest.tensors) {
    const raw = payload.subarray(entry.offset, entry.offset + entry.nbytes);
    if (entry.name === "embedding") {
      embedding = new Float32Array(entry.rows * entry.cols);
      for (let i = 0; i < embedding.length; i++) embedding[i] = raw.readFloatLE(i * 4);
    } else {
      tensors.set(tensorKey(entry.layer, entry.op), tensorFromChannelMajor(raw, entry.rows, entry.cols));
    }
  }
  if (!embedding) throw new Error("manifest has no embedding tensor");
  return { spec, embedding, tensors };
}

export function writeContainer(model: ContainerModel, manifestPath: string): void {
  const payloadName = basename(manifestPath).replace(/\.json$/, "") + ".bin";
  const entries: object[] = [];
  const blobs: Buffer[] = [];
  let offset = 0;

  const emb = Buffer.alloc(model.embedding.length * 4);
  for (let i = 0; i < model.embedding.length; i++) emb.writeFloatLE(model.embedding[i], i * 4);
  entries.push({
    name: "embedding",
    rows: model.spec.vocab_size,
    cols: model.spec.hidden_dim,
    offset,
    nbytes: emb.length,
  });
  blobs.push(emb);
  offset += emb.length;

  for (let layer = 0; layer < model.spec.n_layers; layer++) {
    for (const op of OP_ORDER) {
      const t = model.tensors.get(tensorKey(layer, op));
      if (!t) throw new Error(`missing tensor ${layer}.${op}`);
      const raw = channelMajorBytes(t);
      entries.push({
        name: `layer${layer}.${op}`,
        layer,
        op,
        rows: t.rows,
        cols: t.cols,
        offset,
        nbytes: raw.length,
      });
      blobs.push(raw);
      offset += raw.length;
    }
  }
  const manifest = {
    format: "swapflow-model",
    version: 1,
    spec: {
      ...model.spec,
      op_types: [...OP_ORDER],
    },
    payload: payloadName,
    tensors: entries,
  };
  writeFileSync(manifestPath, JSON.stringify(manifest, sortedKeys, 2) + "\n");
  writeFileSync(join(dirname(manifestPath), payloadName), Buffer.concat(blobs));
}

function sortedKeys(_key: string, value: unknown): unknown {
  if (value && typeof value === "object" && !Array.isArray(value)) {
    return Object.fromEntries(Object.entries(value as object).sort(([a], [b]) => (a < b ? -1 : 1)));
  }
  return value;
}
