/**
 * Checkpoint conversion: HuggingFace Llama-layout directories in, engine
 * model directories out (config.json + weights.kvt + checksums.json).
 *
 * The engine rotates interleaved dimension pairs (2j, 2j+1); Llama-lineage
 * checkpoints rotate split halves (j, j+d/2). Query/key projection rows and
 * QK-norm vectors are permuted accordingly; values and the output projection
 * are untouched because values are never rotated.
 */

import { createHash } from "node:crypto";
import { readFileSync } from "node:fs";
import { join } from "node:path";

import { readSafetensors, StTensor } from "./safetensors.js";
import { Tensor } from "./kvt.js";

export interface EngineConfig {
  n_layers: number;
  n_heads: number;
  n_kv_heads: number;
  head_dim: number;
  hidden_dim: number;
  ffn_dim: number;
  vocab_size: number;
  rope_theta: number;
  norm_eps: number;
  max_position: number;
  qk_norm: boolean;
}

export class UnsupportedArchitectureError extends Error {}

function ropeTheta(hf: any): number {
  if (typeof hf.rope_theta === "number") return hf.rope_theta;
  if (hf.rope_parameters && typeof hf.rope_parameters.rope_theta === "number") {
    return hf.rope_parameters.rope_theta;
  }
  return 10000.0;
}

function refuseRopeScaling(hf: any): void {
  const scaling = hf.rope_scaling ?? null;
  if (scaling && scaling.type && scaling.type !== "default") {
    throw new UnsupportedArchitectureError(`rope scaling '${scaling.type}' is not supported`);
  }
  const params = hf.rope_parameters ?? null;
  if (params && params.rope_type && params.rope_type !== "default") {
    throw new UnsupportedArchitectureError(`rope type '${params.rope_type}' is not supported`);
  }
}

export function translateConfig(hf: any, hasQkNorm: boolean): EngineConfig {
  if (hf.hidden_act && hf.hidden_act !== "silu") {
    throw new UnsupportedArchitectureError(`activation '${hf.hidden_act}' is not supported (SwiGLU models only)`);
  }
  if (hf.attention_bias) {
    throw new UnsupportedArchitectureError("attention projection biases are not supported");
  }
  if (hf.mlp_bias) {
    throw new UnsupportedArchitectureError("MLP biases are not supported");
  }
  if (hf.sliding_window) {
    throw new UnsupportedArchitectureError("sliding-window attention layers are not supported");
  }
  refuseRopeScaling(hf);

  const nHeads = hf.num_attention_heads;
  const nKv = hf.num_key_value_heads ?? nHeads;
  if (!nHeads || nHeads % nKv !== 0) {
    throw new UnsupportedArchitectureError(`query heads (${nHeads}) not divisible by kv heads (${nKv})`);
  }
  const headDim = hf.head_dim ?? Math.floor(hf.hidden_size / nHeads);
  if (headDim % 2 !== 0) {
    throw new UnsupportedArchitectureError(`odd head_dim ${headDim} cannot carry pair rotations`);
  }
  return {
    n_layers: hf.num_hidden_layers,
    n_heads: nHeads,
    n_kv_heads: nKv,
    head_dim: headDim,
    hidden_dim: hf.hidden_size,
    ffn_dim: hf.intermediate_size,
    vocab_size: hf.vocab_size,
    rope_theta: ropeTheta(hf),
    norm_eps: hf.rms_norm_eps ?? 1e-5,
    max_position: hf.max_position_embeddings,
    qk_norm: hasQkNorm,
  };
}

/** Row index map from split-half rotary layout to interleaved pairs. */
export function interleaveMap(headDim: number): number[] {
  const half = headDim / 2;
  const map = new Array<number>(headDim);
  for (let j = 0; j < half; j++) {
    map[2 * j] = j;
    map[2 * j + 1] = j + half;
  }
  return map;
}

/** Permute the rows of a (heads*headDim, hidden) projection, per head block. */
export function permuteRopeRows(t: StTensor, headDim: number): Tensor {
  const [rows, cols] = t.shape;
  if (rows % headDim !== 0) {
    throw new UnsupportedArchitectureError(`projection rows ${rows} not a multiple of head_dim ${headDim}`);
  }
  const map = interleaveMap(headDim);
  const out = new Float32Array(rows * cols);
  for (let h = 0; h < rows / headDim; h++) {
    for (let r = 0; r < headDim; r++) {
      const src = (h * headDim + map[r]) * cols;
      out.set(t.data.subarray(src, src + cols), (h * headDim + r) * cols);
    }
  }
  return { shape: [rows, cols], data: out };
}

/** Permute a (headDim,) vector (QK-norm weights) the same way. */
export function permuteRopeVector(t: StTensor, headDim: number): Tensor {
  if (t.shape.length !== 1 || t.shape[0] !== headDim) {
    throw new UnsupportedArchitectureError(`norm vector shape ${t.shape} does not match head_dim ${headDim}`);
  }
  const map = interleaveMap(headDim);
  const out = new Float32Array(headDim);
  for (let r = 0; r < headDim; r++) out[r] = t.data[map[r]];
  return { shape: [headDim], data: out };
}

function plain(t: StTensor): Tensor {
  return { shape: t.shape, data: t.data };
}

export interface Converted {
  config: EngineConfig;
  tensors: Map<string, Tensor>;
  checksums: Map<string, string>;
}

export function sha256Tensor(t: Tensor): string {
  const buf = Buffer.alloc(4 * t.data.length);
  for (let i = 0; i < t.data.length; i++) buf.writeFloatLE(t.data[i], 4 * i);
  const h = createHash("sha256");
  h.update(JSON.stringify(t.shape));
  h.update(buf);
  return h.digest("hex");
}

export function convertTensors(hfConfig: any, source: Map<string, StTensor>): Converted {
  const names = new Set(source.keys());
  for (const name of names) {
    if (name.endsWith(".bias")) {
      throw new UnsupportedArchitectureError(`bias tensor ${name} is not supported`);
    }
  }
  const hasQkNorm = names.has("model.layers.0.self_attn.q_norm.weight");
  const config = translateConfig(hfConfig, hasQkNorm);

  const take = (name: string): StTensor => {
    const t = source.get(name);
    if (!t) throw new Error(`checkpoint is missing tensor ${name}`);
    names.delete(name);
    return t;
  };

  const out = new Map<string, Tensor>();
  out.set("embed.weight", plain(take("model.embed_tokens.weight")));
  out.set("final_norm", plain(take("model.norm.weight")));
  if (names.has("lm_head.weight")) {
    out.set("lm_head", plain(take("lm_head.weight")));
  } else if (hfConfig.tie_word_embeddings) {
    out.set("lm_head", out.get("embed.weight")!);
  } else {
    throw new Error("checkpoint has no lm_head.weight and embeddings are not tied");
  }

  for (let i = 0; i < config.n_layers; i++) {
    const hf = `model.layers.${i}`;
    const eng = `layers.${i}`;
    out.set(`${eng}.attn.wq`, permuteRopeRows(take(`${hf}.self_attn.q_proj.weight`), config.head_dim));
    out.set(`${eng}.attn.wk`, permuteRopeRows(take(`${hf}.self_attn.k_proj.weight`), config.head_dim));
    out.set(`${eng}.attn.wv`, plain(take(`${hf}.self_attn.v_proj.weight`)));
    out.set(`${eng}.attn.wo`, plain(take(`${hf}.self_attn.o_proj.weight`)));
    if (config.qk_norm) {
      out.set(`${eng}.attn.q_norm`, permuteRopeVector(take(`${hf}.self_attn.q_norm.weight`), config.head_dim));
      out.set(`${eng}.attn.k_norm`, permuteRopeVector(take(`${hf}.self_attn.k_norm.weight`), config.head_dim));
    }
    out.set(`${eng}.mlp.w1`, plain(take(`${hf}.mlp.gate_proj.weight`)));
    out.set(`${eng}.mlp.w3`, plain(take(`${hf}.mlp.up_proj.weight`)));
    out.set(`${eng}.mlp.w2`, plain(take(`${hf}.mlp.down_proj.weight`)));
    out.set(`${eng}.norm_attn`, plain(take(`${hf}.input_layernorm.weight`)));
    out.set(`${eng}.norm_mlp`, plain(take(`${hf}.post_attention_layernorm.weight`)));
  }

  if (names.size > 0) {
    throw new UnsupportedArchitectureError(
      `unrecognized tensors in checkpoint: ${[...names].sort().join(", ")}`
    );
  }

  const checksums = new Map<string, string>();
  for (const [name, t] of out) checksums.set(name, sha256Tensor(t));
  return { config, tensors: out, checksums };
}

export function loadCheckpoint(dir: string): { hfConfig: any; tensors: Map<string, StTensor> } {
  const hfConfig = JSON.parse(readFileSync(join(dir, "config.json"), "utf-8"));
  const archs: string[] = hfConfig.architectures ?? [];
  if (archs.length && !archs.some((a) => /ForCausalLM$/.test(a))) {
    throw new UnsupportedArchitectureError(`not a causal LM checkpoint: ${archs.join(", ")}`);
  }
  const tensors = readSafetensors(readFileSync(join(dir, "model.safetensors")));
  return { hfConfig, tensors };
}
