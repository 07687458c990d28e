/**
 * Reference segmenter backend: a curve-matching classifier served over the
 * DAUGS-WIRE stdio protocol.
 *
 * Usage: node dist/main.js --prototypes <csv> [--temperature 0.2] [--outlier-gain 10]
 *
 * Exit codes: 0 clean shutdown, 2 bad invocation, 3 protocol error.
 */

import { readFileSync } from "node:fs";
import { CurveMatcher, parsePrototypesCsv } from "./matcher.js";
import { ProtocolError, serve } from "./protocol.js";

interface Args {
  prototypes: string;
  temperature: number;
  outlierGain: number;
}

function parseArgs(argv: string[]): Args {
  let prototypes: string | null = null;
  let temperature = 0.2;
  let outlierGain = 10.0;
  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--prototypes") prototypes = argv[++i];
    else if (arg === "--temperature") temperature = Number(argv[++i]);
    else if (arg === "--outlier-gain") outlierGain = Number(argv[++i]);
    else throw new Error(`unknown argument ${arg}`);
  }
  if (!prototypes) throw new Error("--prototypes <csv> is required");
  if (!Number.isFinite(temperature) || temperature <= 0) {
    throw new Error("--temperature must be positive");
  }
  if (!Number.isFinite(outlierGain) || outlierGain < 0) {
    throw new Error("--outlier-gain must be >= 0");
  }
  return { prototypes, temperature, outlierGain };
}

async function main(): Promise<number> {
  let matcher: CurveMatcher;
  try {
    const args = parseArgs(process.argv.slice(2));
    matcher = new CurveMatcher({
      prototypes: parsePrototypesCsv(readFileSync(args.prototypes, "utf8")),
      temperature: args.temperature,
      outlierGain: args.outlierGain,
    });
  } catch (err) {
    console.error(`refbackend: ${(err as Error).message}`);
    return 2;
  }
  try {
    await serve(
      (volume, frames, h, w) => matcher.segment(volume, frames, h, w),
      process.stdin,
      process.stdout,
    );
    return 0;
  } catch (err) {
    if (err instanceof ProtocolError) {
      console.error(`refbackend protocol error: ${err.message}`);
      return 3;
    }
    console.error(`refbackend: ${(err as Error).message}`);
    return 3;
  }
}

main().then((code) => {
  process.exitCode = code;
});
