/**
 * KVT1 tensor container: magic "KVT1", u32 LE tensor count, then per tensor
 * u32 name length, UTF-8 name, u8 rank, rank x u64 LE extents, row-major
 * float32 LE data. Tensors are written sorted by name so identical inputs
 * produce identical bytes.
 */

export interface Tensor {
  shape: number[];
  data: Float32Array;
}

const MAGIC = Buffer.from("KVT1", "ascii");

export function numel(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function writeKvt(tensors: Map<string, Tensor>): Buffer {
  const parts: Buffer[] = [];
  parts.push(MAGIC);
  const count = Buffer.alloc(4);
  count.writeUInt32LE(tensors.size, 0);
  parts.push(count);

  for (const name of [...tensors.keys()].sort()) {
    const t = tensors.get(name)!;
    if (t.data.length !== numel(t.shape)) {
      throw new Error(`${name}: data length ${t.data.length} != shape ${t.shape}`);
    }
    const nameBytes = Buffer.from(name, "utf-8");
    const head = Buffer.alloc(4 + nameBytes.length + 1 + 8 * t.shape.length);
    let at = 0;
    head.writeUInt32LE(nameBytes.length, at);
    at += 4;
    nameBytes.copy(head, at);
    at += nameBytes.length;
    head.writeUInt8(t.shape.length, at);
    at += 1;
    for (const extent of t.shape) {
      head.writeBigUInt64LE(BigInt(extent), at);
      at += 8;
    }
    parts.push(head);
    const data = Buffer.alloc(4 * t.data.length);
    for (let i = 0; i < t.data.length; i++) {
      data.writeFloatLE(t.data[i], 4 * i);
    }
    parts.push(data);
  }
  return Buffer.concat(parts);
}

export function readKvt(buf: Buffer): Map<string, Tensor> {
  if (buf.length < 4 || !buf.subarray(0, 4).equals(MAGIC)) {
    throw new Error(`bad magic: expected KVT1, got ${buf.subarray(0, 4).toString("latin1")}`);
  }
  let at = 4;
  const take = (n: number, what: string): Buffer => {
    if (at + n > buf.length) throw new Error(`truncated while reading ${what}`);
    const out = buf.subarray(at, at + n);
    at += n;
    return out;
  };
  const count = take(4, "tensor count").readUInt32LE(0);
  const out = new Map<string, Tensor>();
  for (let i = 0; i < count; i++) {
    const nameLen = take(4, "name length").readUInt32LE(0);
    const name = take(nameLen, "name").toString("utf-8");
    const rank = take(1, `${name} rank`).readUInt8(0);
    const shape: number[] = [];
    for (let r = 0; r < rank; r++) {
      shape.push(Number(take(8, `${name} extent`).readBigUInt64LE(0)));
    }
    const n = numel(shape);
    const raw = take(4 * n, `${name} data`);
    const data = new Float32Array(n);
    for (let j = 0; j < n; j++) data[j] = raw.readFloatLE(4 * j);
    out.set(name, { shape, data });
  }
  return out;
}
