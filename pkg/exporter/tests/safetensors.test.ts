import { describe, expect, it } from "vitest";

import { readSafetensors } from "../src/safetensors.js";
import { buildSafetensors } from "./helpers.js";

describe("safetensors reader", () => {
  it("reads F32 tensors", () => {
    const buf = buildSafetensors({
      w: { shape: [2, 2], values: [1, -2, 3.5, 0] },
    });
    const t = readSafetensors(buf).get("w")!;
    expect(t.shape).toEqual([2, 2]);
    expect([...t.data]).toEqual([1, -2, 3.5, 0]);
  });

  it("widens BF16 to float32", () => {
    const buf = buildSafetensors({
      w: { shape: [3], values: [1.0, -0.5, 2.0], dtype: "BF16" },
    });
    const t = readSafetensors(buf).get("w")!;
    expect([...t.data]).toEqual([1.0, -0.5, 2.0]); // exactly representable in bf16
  });

  it("widens F16 to float32", () => {
    const buf = buildSafetensors({
      w: { shape: [4], values: [1.0, -0.25, 0.0, 64.0], dtype: "F16" },
    });
    const t = readSafetensors(buf).get("w")!;
    expect([...t.data]).toEqual([1.0, -0.25, 0.0, 64.0]);
  });

  it("skips metadata entries", () => {
    const base = buildSafetensors({ w: { shape: [1], values: [5] } });
    const header = JSON.parse(
      base.subarray(8, 8 + Number(base.readBigUInt64LE(0))).toString("utf-8")
    );
    header.__metadata__ = { format: "pt" };
    const headerJson = Buffer.from(JSON.stringify(header), "utf-8");
    const lenBuf = Buffer.alloc(8);
    lenBuf.writeBigUInt64LE(BigInt(headerJson.length), 0);
    const rebuilt = Buffer.concat([
      lenBuf,
      headerJson,
      base.subarray(8 + Number(base.readBigUInt64LE(0))),
    ]);
    expect([...readSafetensors(rebuilt).get("w")!.data]).toEqual([5]);
  });

  it("rejects unsupported dtypes", () => {
    const base = buildSafetensors({ w: { shape: [1], values: [5] } });
    const headerLen = Number(base.readBigUInt64LE(0));
    const header = JSON.parse(base.subarray(8, 8 + headerLen).toString("utf-8"));
    header.w.dtype = "I64";
    const headerJson = Buffer.from(JSON.stringify(header), "utf-8");
    const lenBuf = Buffer.alloc(8);
    lenBuf.writeBigUInt64LE(BigInt(headerJson.length), 0);
    const rebuilt = Buffer.concat([lenBuf, headerJson, base.subarray(8 + headerLen)]);
    expect(() => readSafetensors(rebuilt)).toThrow(/unsupported dtype/);
  });

  it("rejects truncated headers", () => {
    const buf = buildSafetensors({ w: { shape: [1], values: [5] } });
    expect(() => readSafetensors(buf.subarray(0, 6))).toThrow(/too short/);
  });
});
