import { byteLevelAlphabet } from "../src/tokenizer.js";

/** Serialize float32 tensors into the safetensors layout. */
export function buildSafetensors(
  tensors: Record<string, { shape: number[]; values: number[]; dtype?: string }>
): Buffer {
  const header: Record<string, any> = {};
  const payloads: Buffer[] = [];
  let offset = 0;
  for (const [name, t] of Object.entries(tensors)) {
    const dtype = t.dtype ?? "F32";
    let buf: Buffer;
    if (dtype === "F32") {
      buf = Buffer.alloc(4 * t.values.length);
      t.values.forEach((v, i) => buf.writeFloatLE(v, 4 * i));
    } else if (dtype === "BF16") {
      buf = Buffer.alloc(2 * t.values.length);
      const scratch = Buffer.alloc(4);
      t.values.forEach((v, i) => {
        scratch.writeFloatLE(v, 0);
        buf.writeUInt16LE(scratch.readUInt32LE(0) >>> 16, 2 * i);
      });
    } else if (dtype === "F16") {
      buf = Buffer.alloc(2 * t.values.length);
      t.values.forEach((v, i) => buf.writeUInt16LE(f32ToF16(v), 2 * i));
    } else {
      throw new Error(`helper cannot build dtype ${dtype}`);
    }
    header[name] = { dtype, shape: t.shape, data_offsets: [offset, offset + buf.length] };
    payloads.push(buf);
    offset += buf.length;
  }
  const headerJson = Buffer.from(JSON.stringify(header), "utf-8");
  const lenBuf = Buffer.alloc(8);
  lenBuf.writeBigUInt64LE(BigInt(headerJson.length), 0);
  return Buffer.concat([lenBuf, headerJson, ...payloads]);
}

export function f32ToF16(value: number): number {
  // round-to-nearest-even via float32 bit twiddling, good enough for tests
  const scratch = new DataView(new ArrayBuffer(4));
  scratch.setFloat32(0, value, true);
  const bits = scratch.getUint32(0, true);
  const sign = (bits >>> 16) & 0x8000;
  let exp = (bits >>> 23) & 0xff;
  let frac = bits & 0x7fffff;
  if (exp === 0xff) return sign | 0x7c00 | (frac ? 1 : 0);
  const newExp = exp - 127 + 15;
  if (newExp >= 0x1f) return sign | 0x7c00;
  if (newExp <= 0) {
    if (newExp < -10) return sign;
    frac |= 0x800000;
    const shift = 14 - newExp;
    return sign | (frac >> shift);
  }
  return sign | (newExp << 10) | (frac >> 13);
}

/** tokenizer.json with the full 256-symbol byte alphabet plus given merges. */
export function byteLevelTokenizerJson(
  merges: [string, string][] = [],
  addPrefixSpace = false
): any {
  const vocab: Record<string, number> = {};
  byteLevelAlphabet().forEach((ch, i) => (vocab[ch] = i));
  let next = 256;
  for (const [a, b] of merges) {
    if (!(a + b in vocab)) vocab[a + b] = next++;
  }
  return {
    model: { type: "BPE", vocab, merges },
    pre_tokenizer: { type: "ByteLevel", add_prefix_space: addPrefixSpace, use_regex: true },
    decoder: { type: "ByteLevel" },
  };
}

/** A minimal consistent HF-style Llama checkpoint as in-memory objects. */
export function tinyCheckpoint(opts: { qkNorm?: boolean; tied?: boolean } = {}) {
  const heads = 2;
  const kv = 1;
  const headDim = 4;
  const hidden = 8;
  const ffn = 12;
  const vocab = 16;
  const layers = 1;
  let seed = 7;
  const rand = () => {
    seed = (seed * 1103515245 + 12345) % 2147483648;
    return seed / 2147483648 - 0.5;
  };
  const mat = (r: number, c: number) => ({
    shape: [r, c],
    values: Array.from({ length: r * c }, rand),
  });
  const vec = (n: number) => ({ shape: [n], values: Array.from({ length: n }, rand) });

  const tensors: Record<string, { shape: number[]; values: number[] }> = {
    "model.embed_tokens.weight": mat(vocab, hidden),
    "model.norm.weight": vec(hidden),
    "model.layers.0.self_attn.q_proj.weight": mat(heads * headDim, hidden),
    "model.layers.0.self_attn.k_proj.weight": mat(kv * headDim, hidden),
    "model.layers.0.self_attn.v_proj.weight": mat(kv * headDim, hidden),
    "model.layers.0.self_attn.o_proj.weight": mat(hidden, heads * headDim),
    "model.layers.0.mlp.gate_proj.weight": mat(ffn, hidden),
    "model.layers.0.mlp.up_proj.weight": mat(ffn, hidden),
    "model.layers.0.mlp.down_proj.weight": mat(hidden, ffn),
    "model.layers.0.input_layernorm.weight": vec(hidden),
    "model.layers.0.post_attention_layernorm.weight": vec(hidden),
  };
  if (!opts.tied) tensors["lm_head.weight"] = mat(vocab, hidden);
  if (opts.qkNorm) {
    tensors["model.layers.0.self_attn.q_norm.weight"] = vec(headDim);
    tensors["model.layers.0.self_attn.k_norm.weight"] = vec(headDim);
  }
  const config = {
    architectures: ["LlamaForCausalLM"],
    model_type: "llama",
    hidden_act: "silu",
    hidden_size: hidden,
    intermediate_size: ffn,
    num_hidden_layers: layers,
    num_attention_heads: heads,
    num_key_value_heads: kv,
    head_dim: headDim,
    vocab_size: vocab,
    max_position_embeddings: 64,
    rms_norm_eps: 1e-5,
    rope_theta: 10000.0,
    attention_bias: false,
    tie_word_embeddings: Boolean(opts.tied),
  };
  return { config, tensors };
}
