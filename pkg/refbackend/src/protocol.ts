/**
 * DAUGS-WIRE framing over standard streams.
 *
 * Handshake: engine sends "DWP1" + u32 LE {patch, frames, classes}; backend
 * replies "DWP1" + u32 LE protocol version (1). Requests and responses are
 * u32 LE id | u32 LE payload bytes | payload. Request payloads are f32 LE
 * patch volumes (x fastest, then y, then t); response payloads are f32 LE
 * probabilities (class fastest, then x, then y). Request id 0xFFFFFFFF with
 * an empty payload means shut down.
 */

export const MAGIC = Buffer.from("DWP1", "ascii");
export const PROTOCOL_VERSION = 1;
export const SHUTDOWN_ID = 0xffffffff;

export class ProtocolError extends Error {}

/** Promise-based exact-length reads over a Node readable stream. */
export class StreamReader {
  private chunks: Buffer[] = [];
  private length = 0;
  private ended = false;
  private pending: { n: number; resolve: (b: Buffer) => void; reject: (e: Error) => void } | null =
    null;

  constructor(stream: NodeJS.ReadableStream) {
    stream.on("data", (chunk: Buffer) => {
      this.chunks.push(chunk);
      this.length += chunk.length;
      this.drain();
    });
    stream.on("end", () => {
      this.ended = true;
      this.drain();
    });
    stream.on("error", (err) => {
      this.ended = true;
      if (this.pending) {
        const p = this.pending;
        this.pending = null;
        p.reject(err instanceof Error ? err : new Error(String(err)));
      }
    });
  }

  private drain(): void {
    if (!this.pending) return;
    const { n, resolve, reject } = this.pending;
    if (this.length >= n) {
      this.pending = null;
      resolve(this.take(n));
    } else if (this.ended) {
      this.pending = null;
      reject(new ProtocolError(`stream ended after ${this.length} of ${n} bytes`));
    }
  }

  private take(n: number): Buffer {
    const out = Buffer.concat(this.chunks, this.length).subarray(0, n);
    const rest = Buffer.concat(this.chunks, this.length).subarray(n);
    this.chunks = rest.length ? [Buffer.from(rest)] : [];
    this.length = rest.length;
    return Buffer.from(out);
  }

  readExact(n: number): Promise<Buffer> {
    if (this.pending) return Promise.reject(new ProtocolError("concurrent read"));
    return new Promise((resolve, reject) => {
      this.pending = { n, resolve, reject };
      this.drain();
    });
  }
}

export interface Handshake {
  patch: number;
  frames: number;
  classes: number;
}

export async function readHandshake(reader: StreamReader): Promise<Handshake> {
  const head = await reader.readExact(16);
  if (!head.subarray(0, 4).equals(MAGIC)) {
    throw new ProtocolError("bad handshake magic");
  }
  return {
    patch: head.readUInt32LE(4),
    frames: head.readUInt32LE(8),
    classes: head.readUInt32LE(12),
  };
}

export function handshakeReply(version: number = PROTOCOL_VERSION): Buffer {
  const out = Buffer.alloc(8);
  MAGIC.copy(out, 0);
  out.writeUInt32LE(version, 4);
  return out;
}

export interface Frame {
  id: number;
  payload: Buffer;
}

export async function readFrame(reader: StreamReader): Promise<Frame> {
  const head = await reader.readExact(8);
  const id = head.readUInt32LE(0);
  const n = head.readUInt32LE(4);
  const payload = n > 0 ? await reader.readExact(n) : Buffer.alloc(0);
  return { id, payload };
}

export function packFrame(id: number, payload: Buffer): Buffer {
  const head = Buffer.alloc(8);
  head.writeUInt32LE(id >>> 0, 0);
  head.writeUInt32LE(payload.length, 4);
  return Buffer.concat([head, payload]);
}

export type SegmentFn = (
  volume: Float64Array,
  frames: number,
  height: number,
  width: number,
) => Float32Array;

/** Request loop: handshake, answer every request, return on shutdown. */
export async function serve(
  segment: SegmentFn,
  input: NodeJS.ReadableStream,
  output: NodeJS.WritableStream,
): Promise<void> {
  const reader = new StreamReader(input);
  const hs = await readHandshake(reader);
  output.write(handshakeReply());
  const volumeBytes = hs.patch * hs.patch * hs.frames * 4;
  for (;;) {
    const frame = await readFrame(reader);
    if (frame.id === SHUTDOWN_ID) return;
    if (frame.payload.length !== volumeBytes) {
      throw new ProtocolError(
        `request ${frame.id}: payload ${frame.payload.length} bytes, expected ${volumeBytes}`,
      );
    }
    const f32 = new Float32Array(
      frame.payload.buffer,
      frame.payload.byteOffset,
      volumeBytes / 4,
    );
    const volume = Float64Array.from(f32);
    const probs = segment(volume, hs.frames, hs.patch, hs.patch);
    output.write(packFrame(frame.id, Buffer.from(probs.buffer, 0, probs.byteLength)));
  }
}
