/**
 * Minimal safetensors reader: u64 LE header length, JSON header mapping
 * tensor name -> { dtype, shape, data_offsets }, raw little-endian data.
 * F32, F16 and BF16 payloads are all widened to Float32Array.
 */

export interface StTensor {
  dtype: string;
  shape: number[];
  data: Float32Array;
}

function f16ToF32(bits: number): number {
  const sign = (bits & 0x8000) >> 15;
  const exp = (bits & 0x7c00) >> 10;
  const frac = bits & 0x03ff;
  let value: number;
  if (exp === 0) {
    value = frac * 2 ** -24; // subnormal
  } else if (exp === 0x1f) {
    value = frac ? NaN : Infinity;
  } else {
    value = (1 + frac / 1024) * 2 ** (exp - 15);
  }
  return sign ? -value : value;
}

const BF16_SCRATCH = new DataView(new ArrayBuffer(4));

function bf16ToF32(bits: number): number {
  BF16_SCRATCH.setUint32(0, bits << 16, true);
  return BF16_SCRATCH.getFloat32(0, true);
}

export function readSafetensors(buf: Buffer): Map<string, StTensor> {
  if (buf.length < 8) throw new Error("safetensors: file too short for header");
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) throw new Error("safetensors: truncated header");
  const header = JSON.parse(buf.subarray(8, 8 + headerLen).toString("utf-8"));
  const base = 8 + headerLen;

  const out = new Map<string, StTensor>();
  for (const [name, info] of Object.entries<any>(header)) {
    if (name === "__metadata__") continue;
    const { dtype, shape, data_offsets } = info;
    const [start, end] = data_offsets;
    const raw = buf.subarray(base + start, base + end);
    const n = shape.reduce((a: number, b: number) => a * b, 1);
    const data = new Float32Array(n);
    if (dtype === "F32") {
      if (raw.length !== 4 * n) throw new Error(`${name}: F32 payload size mismatch`);
      for (let i = 0; i < n; i++) data[i] = raw.readFloatLE(4 * i);
    } else if (dtype === "F16") {
      if (raw.length !== 2 * n) throw new Error(`${name}: F16 payload size mismatch`);
      for (let i = 0; i < n; i++) data[i] = f16ToF32(raw.readUInt16LE(2 * i));
    } else if (dtype === "BF16") {
      if (raw.length !== 2 * n) throw new Error(`${name}: BF16 payload size mismatch`);
      for (let i = 0; i < n; i++) data[i] = bf16ToF32(raw.readUInt16LE(2 * i));
    } else {
      throw new Error(`${name}: unsupported dtype ${dtype}`);
    }
    out.set(name, { dtype, shape, data });
  }
  return out;
}
