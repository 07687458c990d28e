import { PassThrough } from "node:stream";
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { CurveMatcher, parsePrototypesCsv } from "../src/matcher.js";
import {
  MAGIC,
  PROTOCOL_VERSION,
  SHUTDOWN_ID,
  StreamReader,
  handshakeReply,
  packFrame,
  readFrame,
  readHandshake,
  serve,
} from "../src/protocol.js";

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "fixtures");

function handshakeBytes(patch: number, frames: number, classes: number): Buffer {
  const b = Buffer.alloc(16);
  MAGIC.copy(b, 0);
  b.writeUInt32LE(patch, 4);
  b.writeUInt32LE(frames, 8);
  b.writeUInt32LE(classes, 12);
  return b;
}

describe("framing", () => {
  it("reads frames split across chunks", async () => {
    const stream = new PassThrough();
    const reader = new StreamReader(stream);
    const frame = packFrame(42, Buffer.from([1, 2, 3, 4, 5]));
    stream.write(frame.subarray(0, 3));
    setTimeout(() => {
      stream.write(frame.subarray(3));
    }, 5);
    const got = await readFrame(reader);
    expect(got.id).toBe(42);
    expect(Array.from(got.payload)).toEqual([1, 2, 3, 4, 5]);
  });

  it("rejects a truncated stream", async () => {
    const stream = new PassThrough();
    const reader = new StreamReader(stream);
    stream.end(Buffer.from([1, 2, 3]));
    await expect(readFrame(reader)).rejects.toThrow(/ended/);
  });

  it("parses the handshake and encodes the reply", async () => {
    const stream = new PassThrough();
    const reader = new StreamReader(stream);
    stream.end(handshakeBytes(64, 30, 3));
    const hs = await readHandshake(reader);
    expect(hs).toEqual({ patch: 64, frames: 30, classes: 3 });
    const reply = handshakeReply();
    expect(reply.subarray(0, 4).toString("ascii")).toBe("DWP1");
    expect(reply.readUInt32LE(4)).toBe(PROTOCOL_VERSION);
  });

  it("rejects a bad handshake magic", async () => {
    const stream = new PassThrough();
    const reader = new StreamReader(stream);
    const bad = handshakeBytes(8, 4, 3);
    bad.write("NOPE", 0, "ascii");
    stream.end(bad);
    await expect(readHandshake(reader)).rejects.toThrow(/magic/);
  });
});

describe("serve loop", () => {
  it("answers requests and stops on the shutdown id", async () => {
    const patch = 2;
    const frames = 3;
    const input = new PassThrough();
    const output = new PassThrough();
    const done = serve(
      (volume, t, h, w) => {
        expect(t).toBe(frames);
        expect(h * w).toBe(patch * patch);
        const out = new Float32Array(h * w * 3);
        for (let p = 0; p < h * w; p++) {
          out[p * 3] = 1; // everything background
        }
        return out;
      },
      input,
      output,
    );
    input.write(handshakeBytes(patch, frames, 3));
    const volume = Buffer.alloc(patch * patch * frames * 4);
    input.write(packFrame(7, volume));
    input.write(packFrame(SHUTDOWN_ID, Buffer.alloc(0)));
    input.end();
    await done;
    const blob: Buffer = output.read();
    expect(blob.subarray(0, 8).equals(handshakeReply())).toBe(true);
    expect(blob.readUInt32LE(8)).toBe(7);
    expect(blob.readUInt32LE(12)).toBe(patch * patch * 3 * 4);
  });

  it("raises on payload size mismatch", async () => {
    const input = new PassThrough();
    const output = new PassThrough();
    const done = serve(() => new Float32Array(12), input, output);
    input.write(handshakeBytes(2, 3, 3));
    input.write(packFrame(1, Buffer.alloc(5)));
    input.end();
    await expect(done).rejects.toThrow(/payload/);
  });
});

describe("golden transcript", () => {
  it("replays the recorded engine session byte-for-byte", async () => {
    const matcher = new CurveMatcher({
      prototypes: parsePrototypesCsv(readFileSync(join(FIXTURES, "prototypes.csv"), "utf8")),
      temperature: 0.2,
      outlierGain: 10.0,
    });
    const input = new PassThrough();
    const output = new PassThrough();
    const chunks: Buffer[] = [];
    output.on("data", (c) => chunks.push(c));
    const done = serve(
      (volume, t, h, w) => matcher.segment(volume, t, h, w),
      input,
      output,
    );
    input.end(readFileSync(join(FIXTURES, "golden_input.bin")));
    await done;
    const got = Buffer.concat(chunks);
    const want = readFileSync(join(FIXTURES, "golden_output.bin"));
    expect(got.equals(want)).toBe(true);
  });
});
