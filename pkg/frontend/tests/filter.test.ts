/**
 * Conformance against the shared filter corpus: the client-side parser
 * must accept exactly the strings the service parser accepts, with the
 * same canonical spelling and the same error offsets.
 */

import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { FilterSyntaxError, parse, render, syntaxProblem, variablesOf } from "../src/filter.js";

const here = dirname(fileURLToPath(import.meta.url));
const corpus = JSON.parse(
  readFileSync(join(here, "..", "..", "tests", "data", "filter_corpus.json"), "utf-8"),
);

describe("shared corpus conformance", () => {
  it("accepts every accept case with the exact canonical rendering", () => {
    for (const { text, canonical } of corpus.accept) {
      const expr = parse(text);
      expect(render(expr), JSON.stringify(text)).toBe(canonical);
    }
  });

  it("renders the nine golden expressions back to their exact spelling", () => {
    expect(new Set(corpus.golden).size).toBe(9);
    for (const text of corpus.golden) {
      expect(render(parse(text))).toBe(text);
    }
  });

  it("rejects every reject case at the exact offset", () => {
    for (const { text, offset } of corpus.reject) {
      let caught: FilterSyntaxError | null = null;
      try {
        parse(text);
      } catch (err) {
        if (err instanceof FilterSyntaxError) caught = err;
        else throw err;
      }
      expect(caught, JSON.stringify(text)).not.toBeNull();
      expect(caught!.offset, JSON.stringify(text)).toBe(offset);
    }
  });
});

describe("parse shape", () => {
  it("applies precedence: & binds tighter than |", () => {
    expect(parse("bx<1|gotmean>2&levr<3")).toEqual({
      kind: "or",
      left: { kind: "cmp", variable: "bx", op: "<", literal: 1 },
      right: {
        kind: "and",
        left: { kind: "cmp", variable: "gotmean", op: ">", literal: 2 },
        right: { kind: "cmp", variable: "levr", op: "<", literal: 3 },
      },
    });
  });

  it("keeps structurally required groups only", () => {
    expect(render(parse("(bx<1|gotmean>2)&levr<3"))).toBe("(bx<1|gotmean>2)&levr<3");
    expect(render(parse("(bx<1)&(levr<3)"))).toBe("bx<1&levr<3");
  });

  it("collects referenced variables", () => {
    expect([...variablesOf(parse("bx<1&(zz>2|bx<5)"))].sort()).toEqual(["bx", "zz"]);
  });

  it("round-trips parse/render", () => {
    for (const text of corpus.golden) {
      const expr = parse(text);
      expect(parse(render(expr))).toEqual(expr);
    }
  });
});

describe("syntaxProblem helper", () => {
  it("returns null for valid text", () => {
    expect(syntaxProblem("bx<10")).toBeNull();
  });

  it("returns the error for invalid text", () => {
    const problem = syntaxProblem("bx>2000&");
    expect(problem).not.toBeNull();
    expect(problem!.offset).toBe(8);
  });
});
