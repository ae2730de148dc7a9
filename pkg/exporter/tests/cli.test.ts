import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { beforeAll, describe, expect, it } from "vitest";

import { main } from "../src/cli.js";
import { buildSafetensors, byteLevelTokenizerJson, tinyCheckpoint } from "./helpers.js";

let checkpointDir: string;

beforeAll(() => {
  checkpointDir = mkdtempSync(join(tmpdir(), "ckpt-"));
  const { config, tensors } = tinyCheckpoint();
  writeFileSync(join(checkpointDir, "config.json"), JSON.stringify(config));
  writeFileSync(join(checkpointDir, "model.safetensors"), buildSafetensors(tensors));
  writeFileSync(
    join(checkpointDir, "tokenizer.json"),
    JSON.stringify(byteLevelTokenizerJson([["h", "i"]]))
  );
});

describe("export command", () => {
  it("writes a model directory and is idempotent", () => {
    const out1 = mkdtempSync(join(tmpdir(), "out-"));
    const out2 = mkdtempSync(join(tmpdir(), "out-"));
    expect(main(["export", "--checkpoint", checkpointDir, "--out", out1])).toBe(0);
    expect(main(["export", "--checkpoint", checkpointDir, "--out", out2])).toBe(0);

    const cfg = JSON.parse(readFileSync(join(out1, "config.json"), "utf-8"));
    expect(cfg.n_layers).toBe(1);
    expect(cfg.qk_norm).toBe(false);
    expect(
      readFileSync(join(out1, "weights.kvt")).equals(readFileSync(join(out2, "weights.kvt")))
    ).toBe(true);
    expect(readFileSync(join(out1, "checksums.json"), "utf-8")).toBe(
      readFileSync(join(out2, "checksums.json"), "utf-8")
    );
  });

  it("verify passes on untouched output and catches tampering", () => {
    const out = mkdtempSync(join(tmpdir(), "out-"));
    expect(main(["export", "--checkpoint", checkpointDir, "--out", out])).toBe(0);
    expect(main(["verify", "--model", out])).toBe(0);

    const weights = readFileSync(join(out, "weights.kvt"));
    weights[weights.length - 3] ^= 0xff; // flip a bit inside the last tensor
    writeFileSync(join(out, "weights.kvt"), weights);
    expect(main(["verify", "--model", out])).toBe(1);
  });

  it("fails cleanly on a broken checkpoint", () => {
    const broken = mkdtempSync(join(tmpdir(), "broken-"));
    writeFileSync(join(broken, "config.json"), JSON.stringify({ hidden_act: "gelu" }));
    writeFileSync(join(broken, "model.safetensors"), buildSafetensors({}));
    expect(main(["export", "--checkpoint", broken, "--out", join(broken, "out")])).toBe(1);
  });
});

describe("tokenize command", () => {
  it("writes whitespace-separated decimal ids", () => {
    const out = join(mkdtempSync(join(tmpdir(), "tok-")), "ids.txt");
    expect(
      main(["tokenize", "--checkpoint", checkpointDir, "--text", "hi hi", "--out", out])
    ).toBe(0);
    const ids = readFileSync(out, "utf-8").trim().split(/\s+/).map(Number);
    expect(ids.length).toBeGreaterThan(0);
    expect(ids.every((i) => Number.isInteger(i) && i >= 0)).toBe(true);
  });

  it("writes an empty file for empty text", () => {
    const out = join(mkdtempSync(join(tmpdir(), "tok-")), "ids.txt");
    expect(main(["tokenize", "--checkpoint", checkpointDir, "--text", "", "--out", out])).toBe(0);
    expect(readFileSync(out, "utf-8")).toBe("");
  });

  it("is stable across invocations", () => {
    const dir = mkdtempSync(join(tmpdir(), "tok-"));
    const a = join(dir, "a.txt");
    const b = join(dir, "b.txt");
    main(["tokenize", "--checkpoint", checkpointDir, "--text", "stable sentence", "--out", a]);
    main(["tokenize", "--checkpoint", checkpointDir, "--text", "stable sentence", "--out", b]);
    expect(readFileSync(a, "utf-8")).toBe(readFileSync(b, "utf-8"));
  });

  it("reads text from a file with --in", () => {
    const dir = mkdtempSync(join(tmpdir(), "tok-"));
    const src = join(dir, "prompt.txt");
    writeFileSync(src, "from a file");
    const out = join(dir, "ids.txt");
    expect(main(["tokenize", "--checkpoint", checkpointDir, "--in", src, "--out", out])).toBe(0);
    expect(readFileSync(out, "utf-8").trim().length).toBeGreaterThan(0);
  });
});

describe("usage errors", () => {
  it("unknown command exits 1", () => {
    expect(main(["frobnicate"])).toBe(1);
  });

  it("missing flags exit 1", () => {
    expect(main(["export", "--checkpoint", checkpointDir])).toBe(1);
  });
});
