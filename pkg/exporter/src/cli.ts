#!/usr/bin/env node
/**
 * kvc-export: one-shot conversion of small Llama-architecture checkpoints
 * into the kvc engine's model directory format, plus prompt tokenization.
 *
 * Usage:
 *   kvc-export export   --checkpoint <hf-dir> --out <model-dir>
 *   kvc-export tokenize --checkpoint <hf-dir> --text "..." --out <ids-file>
 *   kvc-export tokenize --checkpoint <hf-dir> --in <text-file> --out <ids-file>
 *   kvc-export verify   --model <model-dir>
 *
 * `export` writes config.json, weights.kvt and checksums.json, printing one
 * sha256 line per tensor. `verify` recomputes checksums from weights.kvt and
 * compares them against checksums.json, exiting 1 on any mismatch.
 */

import { mkdirSync, readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { convertTensors, loadCheckpoint, sha256Tensor } from "./convert.js";
import { readKvt, writeKvt } from "./kvt.js";
import { BpeTokenizer } from "./tokenizer.js";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`malformed arguments near ${key}`);
    }
    flags.set(key.slice(2), argv[i + 1]);
  }
  return flags;
}

function need(flags: Map<string, string>, name: string): string {
  const v = flags.get(name);
  if (!v) throw new Error(`missing required flag --${name}`);
  return v;
}

function cmdExport(flags: Map<string, string>): number {
  const { hfConfig, tensors } = loadCheckpoint(need(flags, "checkpoint"));
  const { config, tensors: converted, checksums } = convertTensors(hfConfig, tensors);

  const outDir = need(flags, "out");
  mkdirSync(outDir, { recursive: true });
  writeFileSync(join(outDir, "config.json"), JSON.stringify(config, null, 2) + "\n");
  writeFileSync(join(outDir, "weights.kvt"), writeKvt(converted));
  writeFileSync(
    join(outDir, "checksums.json"),
    JSON.stringify(Object.fromEntries([...checksums].sort()), null, 2) + "\n"
  );
  for (const name of [...checksums.keys()].sort()) {
    console.log(`${checksums.get(name)}  ${name}`);
  }
  console.log(`exported ${converted.size} tensors to ${outDir}`);
  return 0;
}

function cmdTokenize(flags: Map<string, string>): number {
  const tok = BpeTokenizer.fromFile(join(need(flags, "checkpoint"), "tokenizer.json"));
  const text = flags.has("text")
    ? flags.get("text")!
    : readFileSync(need(flags, "in"), "utf-8");
  const ids = tok.encode(text);
  writeFileSync(need(flags, "out"), ids.join(" ") + (ids.length ? "\n" : ""));
  console.log(`wrote ${ids.length} token ids`);
  return 0;
}

function cmdVerify(flags: Map<string, string>): number {
  const dir = need(flags, "model");
  const recorded: Record<string, string> = JSON.parse(
    readFileSync(join(dir, "checksums.json"), "utf-8")
  );
  const tensors = readKvt(readFileSync(join(dir, "weights.kvt")));
  let bad = 0;
  for (const [name, want] of Object.entries(recorded)) {
    const t = tensors.get(name);
    const got = t ? sha256Tensor(t) : "<missing>";
    if (got !== want) {
      console.error(`checksum mismatch: ${name}`);
      bad += 1;
    }
  }
  for (const name of tensors.keys()) {
    if (!(name in recorded)) {
      console.error(`tensor not in manifest: ${name}`);
      bad += 1;
    }
  }
  console.log(bad === 0 ? `verified ${tensors.size} tensors` : `${bad} mismatches`);
  return bad === 0 ? 0 : 1;
}

export function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    const flags = parseFlags(rest);
    if (command === "export") return cmdExport(flags);
    if (command === "tokenize") return cmdTokenize(flags);
    if (command === "verify") return cmdVerify(flags);
    console.error("usage: kvc-export {export|tokenize|verify} --flag value ...");
    return 1;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("cli.js") || entry.endsWith("kvc-export")) {
  process.exit(main(process.argv.slice(2)));
}
