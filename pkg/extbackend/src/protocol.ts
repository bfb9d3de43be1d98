/**
 * Binary wire protocol for volume segmentation requests, little-endian:
 *
 *   request  = "AWSG" | u32 version=1 | u32 nx,ny,nz | f32 sx,sy,sz
 *              | f32 ox,oy,oz | f32 payload (nx*ny*nz values, x-fastest)
 *   response = "AWSP" | u32 status
 *              status == 0: 36-byte geometry header (echoed) + f32 payload
 *              status != 0: u32 length + UTF-8 message
 */

export const REQUEST_MAGIC = "AWSG";
export const RESPONSE_MAGIC = "AWSP";
export const PROTOCOL_VERSION = 1;

const HEADER_BYTES = 44; // magic + version + geometry
const GEOMETRY_BYTES = 36; // dims + spacing + origin

export class ProtocolError extends Error {}

export interface Request {
  dims: [number, number, number];
  spacing: [number, number, number];
  origin: [number, number, number];
  /** Raw 36-byte geometry block, echoed verbatim into the response. */
  geometryBytes: Buffer;
  values: Float32Array;
}

function magicOf(buf: Buffer, offset: number): string {
  return buf.toString("latin1", offset, offset + 4);
}

export function decodeRequest(buf: Buffer): Request {
  if (buf.length < HEADER_BYTES) {
    throw new ProtocolError(`request truncated at ${buf.length} bytes`);
  }
  const magic = magicOf(buf, 0);
  if (magic !== REQUEST_MAGIC) {
    throw new ProtocolError(`bad request magic ${JSON.stringify(magic)}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== PROTOCOL_VERSION) {
    throw new ProtocolError(`unsupported protocol version ${version}`);
  }
  const dims: [number, number, number] = [
    buf.readUInt32LE(8),
    buf.readUInt32LE(12),
    buf.readUInt32LE(16),
  ];
  if (dims.some((d) => d < 1)) {
    throw new ProtocolError(`invalid dims ${dims.join("x")}`);
  }
  const spacing: [number, number, number] = [
    buf.readFloatLE(20),
    buf.readFloatLE(24),
    buf.readFloatLE(28),
  ];
  const origin: [number, number, number] = [
    buf.readFloatLE(32),
    buf.readFloatLE(36),
    buf.readFloatLE(40),
  ];
  const count = dims[0] * dims[1] * dims[2];
  const need = count * 4;
  if (buf.length - HEADER_BYTES < need) {
    throw new ProtocolError(
      `payload holds ${buf.length - HEADER_BYTES} bytes, need ${need}`,
    );
  }
  // copy into a fresh (aligned) buffer before viewing as float32
  const payload = Uint8Array.prototype.slice.call(buf, HEADER_BYTES, HEADER_BYTES + need);
  const values = new Float32Array(payload.buffer, 0, count);
  const geometryBytes = Buffer.from(buf.subarray(8, 8 + GEOMETRY_BYTES));
  return { dims, spacing, origin, geometryBytes, values };
}

export function encodeOkResponse(geometryBytes: Buffer, values: Float32Array): Buffer {
  if (geometryBytes.length !== GEOMETRY_BYTES) {
    throw new ProtocolError(`geometry block must be ${GEOMETRY_BYTES} bytes`);
  }
  const head = Buffer.alloc(8);
  head.write(RESPONSE_MAGIC, 0, "latin1");
  head.writeUInt32LE(0, 4);
  const payload = Buffer.from(values.buffer, values.byteOffset, values.length * 4);
  return Buffer.concat([head, geometryBytes, payload]);
}

export function encodeErrorResponse(status: number, message: string): Buffer {
  if (status === 0) {
    throw new ProtocolError("error responses need a nonzero status");
  }
  const text = Buffer.from(message, "utf-8");
  const head = Buffer.alloc(12);
  head.write(RESPONSE_MAGIC, 0, "latin1");
  head.writeUInt32LE(status >>> 0, 4);
  head.writeUInt32LE(text.length, 8);
  return Buffer.concat([head, text]);
}
