import { execFile } from "node:child_process";
import { existsSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";
import { describe, expect, it } from "vitest";

import { buildRequest } from "./protocol.test.js";

const here = dirname(fileURLToPath(import.meta.url));
const MAIN = join(here, "..", "dist", "main.js");

interface RunResult {
  code: number;
  stdout: Buffer;
  stderr: string;
}

function runAdapter(args: string[], input: Buffer): Promise<RunResult> {
  return new Promise((resolve, reject) => {
    const child = execFile(
      "node",
      [MAIN, ...args],
      { encoding: "buffer", maxBuffer: 64 * 1024 * 1024 },
      (error, stdout, stderr) => {
        const code =
          error && typeof (error as NodeJS.ErrnoException).code === "number"
            ? ((error as NodeJS.ErrnoException).code as unknown as number)
            : error
              ? ((error as { code?: number }).code ?? 1)
              : 0;
        resolve({ code, stdout, stderr: stderr.toString("utf-8") });
      },
    );
    child.stdin?.end(input);
    child.on("error", reject);
  });
}

// integration tests need the compiled entry point (npm test builds first)
const itBuilt = existsSync(MAIN) ? it : it.skip;

describe("adapter process", () => {
  itBuilt("threshold rule answers an all-air volume with all ones", async () => {
    const req = buildRequest(
      [2, 2, 2], [1, 1, 1], [0, 0, 0],
      new Array(8).fill(-1000),
    );
    const { code, stdout } = await runAdapter(["threshold", "--hu", "-900"], req);
    expect(code).toBe(0);
    expect(stdout.toString("latin1", 0, 4)).toBe("AWSP");
    expect(stdout.readUInt32LE(4)).toBe(0);
    expect(stdout.subarray(8, 44)).toEqual(req.subarray(8, 44));
    for (let i = 0; i < 8; i++) {
      expect(stdout.readFloatLE(44 + 4 * i)).toBe(1.0);
    }
  });

  itBuilt("passthrough echoes a probability volume", async () => {
    const values = [0, 0.25, 0.5, 0.75, 1, 0.1, 0.9, 0.33];
    const req = buildRequest([2, 2, 2], [2, 2, 2], [1, 1, 1], values);
    const { code, stdout } = await runAdapter(["passthrough"], req);
    expect(code).toBe(0);
    for (let i = 0; i < values.length; i++) {
      expect(stdout.readFloatLE(44 + 4 * i)).toBeCloseTo(values[i], 6);
    }
  });

  itBuilt("malformed request yields an error frame and nonzero exit", async () => {
    const { code, stdout } = await runAdapter(
      ["threshold", "--hu", "-900"],
      Buffer.from("NOTAFRAME-------------------------------------------"),
    );
    expect(code).not.toBe(0);
    expect(stdout.toString("latin1", 0, 4)).toBe("AWSP");
    expect(stdout.readUInt32LE(4)).not.toBe(0);
    const len = stdout.readUInt32LE(8);
    expect(stdout.toString("utf-8", 12, 12 + len)).toMatch(/magic/);
  });

  itBuilt("bad usage exits 2 without touching the protocol", async () => {
    const { code, stdout, stderr } = await runAdapter(["mystery"], Buffer.alloc(0));
    expect(code).toBe(2);
    expect(stdout.length).toBe(0);
    expect(stderr).toMatch(/usage/);
  });
});
