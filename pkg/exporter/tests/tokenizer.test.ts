import { describe, expect, it } from "vitest";

import { BpeTokenizer, byteLevelAlphabet } from "../src/tokenizer.js";
import { byteLevelTokenizerJson } from "./helpers.js";

const ALPHA = byteLevelAlphabet();
const SPACE = ALPHA[0x20]; // 'Ġ'

describe("byte-level alphabet", () => {
  it("covers all 256 bytes injectively", () => {
    expect(new Set(ALPHA).size).toBe(256);
    expect(ALPHA[0x61]).toBe("a");
    expect(SPACE).toBe("Ġ");
  });
});

describe("bpe tokenizer", () => {
  it("encodes empty text to nothing", () => {
    const tok = new BpeTokenizer(byteLevelTokenizerJson());
    expect(tok.encode("")).toEqual([]);
  });

  it("round-trips ASCII through bytes alone", () => {
    const tok = new BpeTokenizer(byteLevelTokenizerJson());
    const text = "the cache holds 42 keys, right?";
    expect(tok.decode(tok.encode(text))).toBe(text);
  });

  it("round-trips multi-byte UTF-8", () => {
    const tok = new BpeTokenizer(byteLevelTokenizerJson());
    const text = "naïve störage — ok";
    expect(tok.decode(tok.encode(text))).toBe(text);
  });

  it("applies merges lowest-rank-first", () => {
    const spec = byteLevelTokenizerJson([
      ["h", "e"],
      [SPACE, "t"],
      [`${SPACE}t`, "he"],
    ]);
    const tok = new BpeTokenizer(spec);
    const ids = tok.encode("the the");
    // "the" -> t,he ; " the" -> Ġthe (merged all the way)
    const vocab = spec.model.vocab as Record<string, number>;
    expect(ids).toEqual([vocab["t"], vocab["he"], vocab[`${SPACE}the`]]);
    expect(tok.decode(ids)).toBe("the the");
  });

  it("accepts merges written as strings", () => {
    const spec = byteLevelTokenizerJson([["a", "b"]]);
    spec.model.merges = ["a b"];
    const tok = new BpeTokenizer(spec);
    const vocab = spec.model.vocab as Record<string, number>;
    expect(tok.encode("ab")).toEqual([vocab["ab"]]);
  });

  it("honors add_prefix_space", () => {
    const plain = new BpeTokenizer(byteLevelTokenizerJson([], false));
    const prefixed = new BpeTokenizer(byteLevelTokenizerJson([], true));
    expect(prefixed.encode("hi")).toEqual(plain.encode(" hi"));
    expect(prefixed.encode(" hi")).toEqual(plain.encode(" hi"));
  });

  it("splits numbers and words like the standard pattern", () => {
    const tok = new BpeTokenizer(byteLevelTokenizerJson());
    // "a1" splits into letter chunk + number chunk; both single-byte tokens here
    expect(tok.encode("a1").length).toBe(2);
    expect(tok.decode(tok.encode("a1"))).toBe("a1");
  });

  it("rejects non-BPE models", () => {
    expect(() => new BpeTokenizer({ model: { type: "WordPiece" } })).toThrow(/unsupported/);
  });

  it("rejects unknown ids on decode", () => {
    const tok = new BpeTokenizer(byteLevelTokenizerJson());
    expect(() => tok.decode([99999])).toThrow(/not in the vocabulary/);
  });
});
