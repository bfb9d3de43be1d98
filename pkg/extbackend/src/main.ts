/**
 * One-shot adapter process: reads a request volume from stdin, applies the
 * rule selected on the command line, writes the response to stdout.
 *
 * Exit codes: 0 success, 1 protocol error (error frame also written to
 * stdout), 2 bad command-line usage (no frame; no request was consumed).
 */
import {
  ProtocolError,
  decodeRequest,
  encodeErrorResponse,
  encodeOkResponse,
} from "./protocol.js";
import { USAGE, UsageError, applyRule, parseRuleArgs } from "./rules.js";

async function readAll(stream: NodeJS.ReadableStream): Promise<Buffer> {
  const chunks: Buffer[] = [];
  for await (const chunk of stream) {
    chunks.push(Buffer.isBuffer(chunk) ? chunk : Buffer.from(chunk));
  }
  return Buffer.concat(chunks);
}

function writeAll(stream: NodeJS.WritableStream, data: Buffer): Promise<void> {
  return new Promise((resolve, reject) => {
    stream.write(data, (err) => (err ? reject(err) : resolve()));
  });
}

async function main(): Promise<number> {
  let rule;
  try {
    rule = parseRuleArgs(process.argv.slice(2));
  } catch (err) {
    if (err instanceof UsageError) {
      process.stderr.write(`${err.message}\n${USAGE}\n`);
      return 2;
    }
    throw err;
  }
  const request = await readAll(process.stdin);
  try {
    const { geometryBytes, values } = decodeRequest(request);
    const probabilities = applyRule(rule, values);
    await writeAll(process.stdout, encodeOkResponse(geometryBytes, probabilities));
    return 0;
  } catch (err) {
    if (err instanceof ProtocolError) {
      await writeAll(process.stdout, encodeErrorResponse(1, err.message));
      process.stderr.write(`protocol error: ${err.message}\n`);
      return 1;
    }
    throw err;
  }
}

main().then(
  (code) => {
    process.exitCode = code;
  },
  (err) => {
    process.stderr.write(`fatal: ${err?.stack ?? err}\n`);
    process.exitCode = 3;
  },
);
