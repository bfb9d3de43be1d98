/** Segmentation rules the adapter can apply in place of a real model. */

export type Rule =
  | { kind: "threshold"; hu: number }
  | { kind: "passthrough" };

export class UsageError extends Error {}

export const USAGE =
  "usage: main.js threshold --hu <value> | main.js passthrough";

export function parseRuleArgs(argv: string[]): Rule {
  const [name, ...rest] = argv;
  if (name === "passthrough") {
    if (rest.length > 0) {
      throw new UsageError(`passthrough takes no arguments`);
    }
    return { kind: "passthrough" };
  }
  if (name === "threshold") {
    if (rest.length !== 2 || rest[0] !== "--hu") {
      throw new UsageError("threshold requires exactly: --hu <value>");
    }
    const hu = Number(rest[1]);
    if (!Number.isFinite(hu)) {
      throw new UsageError(`--hu value ${JSON.stringify(rest[1])} is not finite`);
    }
    return { kind: "threshold", hu };
  }
  throw new UsageError(`unknown rule ${JSON.stringify(name ?? "")}`);
}

/** Probability 1 where the value is at or below the threshold, else 0. */
export function applyThreshold(values: Float32Array, hu: number): Float32Array {
  const out = new Float32Array(values.length);
  for (let i = 0; i < values.length; i++) {
    out[i] = values[i] <= hu ? 1.0 : 0.0;
  }
  return out;
}

/** Clamp incoming values into [0, 1] and return them as probabilities. */
export function applyPassthrough(values: Float32Array): Float32Array {
  const out = new Float32Array(values.length);
  for (let i = 0; i < values.length; i++) {
    out[i] = Math.min(1.0, Math.max(0.0, values[i]));
  }
  return out;
}

export function applyRule(rule: Rule, values: Float32Array): Float32Array {
  return rule.kind === "threshold"
    ? applyThreshold(values, rule.hu)
    : applyPassthrough(values);
}
