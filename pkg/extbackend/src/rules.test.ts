import { describe, expect, it } from "vitest";

import {
  UsageError,
  applyPassthrough,
  applyRule,
  applyThreshold,
  parseRuleArgs,
} from "./rules.js";

describe("parseRuleArgs", () => {
  it("parses the threshold rule", () => {
    expect(parseRuleArgs(["threshold", "--hu", "-900"])).toEqual({
      kind: "threshold",
      hu: -900,
    });
  });

  it("parses passthrough", () => {
    expect(parseRuleArgs(["passthrough"])).toEqual({ kind: "passthrough" });
  });

  it.each([
    [[]],
    [["unknown"]],
    [["threshold"]],
    [["threshold", "--hu", "abc"]],
    [["passthrough", "extra"]],
  ])("rejects bad argv %j", (argv) => {
    expect(() => parseRuleArgs(argv as string[])).toThrow(UsageError);
  });
});

describe("applyThreshold", () => {
  it("marks values at or below the threshold", () => {
    const out = applyThreshold(new Float32Array([-1000, -900, -899.5, 40]), -900);
    expect(Array.from(out)).toEqual([1, 1, 0, 0]);
  });

  it("all-air volume maps to all ones", () => {
    const out = applyThreshold(new Float32Array(64).fill(-1000), -900);
    expect(out.every((v) => v === 1)).toBe(true);
  });
});

describe("applyPassthrough", () => {
  it("keeps in-range values exactly", () => {
    const values = new Float32Array([0, 0.25, 0.5, 1]);
    expect(Array.from(applyPassthrough(values))).toEqual([0, 0.25, 0.5, 1]);
  });

  it("clamps out-of-range values", () => {
    const out = applyPassthrough(new Float32Array([-0.5, 1.5, 0.75]));
    expect(Array.from(out)).toEqual([0, 1, 0.75]);
  });
});

describe("applyRule", () => {
  it("dispatches by kind", () => {
    const values = new Float32Array([-1000, 2]);
    expect(Array.from(applyRule({ kind: "threshold", hu: -900 }, values))).toEqual([1, 0]);
    expect(Array.from(applyRule({ kind: "passthrough" }, values))).toEqual([0, 1]);
  });
});
