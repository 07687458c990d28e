/**
 * Curve-matching classifier, numerically mirroring the engine's in-process
 * implementation: z-scored per-pixel time curves are compared against
 * z-scored class prototypes under robust per-frame weights, and class scores
 * are a softmax over the negative weighted-RMS distances.
 *
 * All intermediates are float64; only the wire output is float32. Keep the
 * operation order fixed: cross-implementation agreement is verified to 1e-5.
 */

export function zscoreRow(v: Float64Array): Float64Array {
  const n = v.length;
  let sum = 0;
  for (let i = 0; i < n; i++) sum += v[i];
  const mean = sum / n;
  let ss = 0;
  for (let i = 0; i < n; i++) {
    const d = v[i] - mean;
    ss += d * d;
  }
  const std = Math.sqrt(ss / n);
  const out = new Float64Array(n);
  if (std > 1e-12) {
    for (let i = 0; i < n; i++) out[i] = (v[i] - mean) / std;
  }
  return out;
}

/** numpy-style median: mean of the middle pair for even-length windows. */
function median(values: number[]): number {
  const s = [...values].sort((a, b) => a - b);
  const mid = s.length >> 1;
  return s.length % 2 === 1 ? s[mid] : (s[mid - 1] + s[mid]) / 2;
}

/** Median over the index window [t-2, t+2], truncated at the ends. */
export function movingMedian5(v: Float64Array): Float64Array {
  const n = v.length;
  const out = new Float64Array(n);
  for (let t = 0; t < n; t++) {
    const lo = Math.max(0, t - 2);
    const hi = Math.min(n, t + 3);
    out[t] = median(Array.from(v.subarray(lo, hi)));
  }
  return out;
}

/**
 * Per-frame robustness weights for one patch: frames whose patch-mean
 * intensity departs from its 5-frame moving median are down-weighted by
 * 1 / (1 + gain * r^2); weights are normalized to mean 1.
 */
export function frameWeights(
  volume: Float64Array,
  nFrames: number,
  nPixels: number,
  gain: number,
): Float64Array {
  const w = new Float64Array(nFrames).fill(1);
  if (gain <= 0) return w;
  const m = new Float64Array(nFrames);
  for (let t = 0; t < nFrames; t++) {
    let sum = 0;
    const base = t * nPixels;
    for (let p = 0; p < nPixels; p++) sum += volume[base + p];
    m[t] = sum / nPixels;
  }
  const mz = zscoreRow(m);
  const med = movingMedian5(mz);
  let wSum = 0;
  for (let t = 0; t < nFrames; t++) {
    const r = Math.abs(mz[t] - med[t]);
    w[t] = 1 / (1 + gain * r * r);
    wSum += w[t];
  }
  const wMean = wSum / nFrames;
  for (let t = 0; t < nFrames; t++) w[t] /= wMean;
  return w;
}

export interface MatcherConfig {
  prototypes: Float64Array[]; // 3 raw prototype curves, length = nFrames
  temperature: number;
  outlierGain: number;
}

export class CurveMatcher {
  private readonly q: Float64Array[];
  private readonly tau: number;
  private readonly gain: number;

  constructor(cfg: MatcherConfig) {
    if (cfg.prototypes.length !== 3) {
      throw new Error(`expected 3 prototype curves, got ${cfg.prototypes.length}`);
    }
    this.q = cfg.prototypes.map((p) => {
      const z = zscoreRow(p);
      if (z.every((v) => v === 0)) throw new Error("zero-variance prototype curve");
      return z;
    });
    this.tau = cfg.temperature;
    this.gain = cfg.outlierGain;
  }

  /**
   * volume: float64 samples, x fastest, then y, then t (t * h * w values).
   * Returns float32 probabilities, class fastest, then x, then y.
   */
  segment(volume: Float64Array, nFrames: number, height: number, width: number): Float32Array {
    const nPixels = height * width;
    const w = frameWeights(volume, nFrames, nPixels, this.gain);
    const out = new Float32Array(nPixels * 3);
    const curve = new Float64Array(nFrames);
    const d = new Float64Array(3);
    for (let p = 0; p < nPixels; p++) {
      for (let t = 0; t < nFrames; t++) curve[t] = volume[t * nPixels + p];
      const z = zscoreRow(curve);
      for (let c = 0; c < 3; c++) {
        const q = this.q[c];
        let acc = 0;
        for (let t = 0; t < nFrames; t++) {
          const diff = z[t] - q[t];
          acc += diff * diff * w[t];
        }
        d[c] = Math.sqrt(acc / nFrames);
      }
      // softmax of -d / tau with max subtraction for stability
      const s0 = -d[0] / this.tau;
      const s1 = -d[1] / this.tau;
      const s2 = -d[2] / this.tau;
      const m = Math.max(s0, s1, s2);
      const e0 = Math.exp(s0 - m);
      const e1 = Math.exp(s1 - m);
      const e2 = Math.exp(s2 - m);
      const total = e0 + e1 + e2;
      out[p * 3] = e0 / total;
      out[p * 3 + 1] = e1 / total;
      out[p * 3 + 2] = e2 / total;
    }
    return out;
  }
}

/** Parse a 3-row CSV of prototype curves. */
export function parsePrototypesCsv(text: string): Float64Array[] {
  const rows = text
    .split(/\r?\n/)
    .map((line) => line.trim())
    .filter((line) => line.length > 0)
    .map((line) => Float64Array.from(line.split(",").map(Number)));
  if (rows.length !== 3) {
    throw new Error(`prototype file must hold 3 rows, got ${rows.length}`);
  }
  for (const row of rows) {
    if (row.length !== rows[0].length || Array.from(row).some((v) => !Number.isFinite(v))) {
      throw new Error("prototype rows must be equal-length finite numbers");
    }
  }
  return rows;
}
