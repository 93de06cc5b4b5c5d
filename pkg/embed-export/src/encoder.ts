/** Text encoders: the deterministic stub and the optional real tower.
 *
 * The stub fabricates one fixed pseudorandom vector per prompt string:
 * FNV-1a over the UTF-8 bytes seeds a splitmix32 stream, and each
 * component sums twelve uniforms (Irwin-Hall) for a near-gaussian draw.
 * Only exactly-rounded IEEE arithmetic is involved — no transcendental
 * functions — so the bytes it produces are identical on every engine.
 * Stub vectors carry no semantics; they exist so the export pipeline and
 * its consumers can be exercised without model weights.
 */

import { ConfigError, DataError } from "./errors.js";

export const STUB_MODEL_ID = "stub/deterministic-v1";

export interface PromptEncoder {
  readonly modelName: string;
  readonly dim: number;
  /** Whether the encoder's vocabulary covers this class token. */
  knowsToken(cls: string): boolean;
  encode(prompt: string): Promise<Float64Array>;
}

function fnv1a(text: string): number {
  const bytes = new TextEncoder().encode(text);
  let hash = 0x811c9dc5;
  for (const byte of bytes) {
    hash ^= byte;
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

function splitmix32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x9e3779b9) >>> 0;
    let z = state;
    z ^= z >>> 16;
    z = Math.imul(z, 0x21f0aaad);
    z ^= z >>> 15;
    z = Math.imul(z, 0x735a2d97);
    z ^= z >>> 15;
    return z >>> 0;
  };
}

// tokens the stub's stand-in vocabulary accepts: letters, digits, spaces,
// hyphens, underscores — mirroring what a word-piece vocabulary would
// cover for detector class names
const KNOWN_TOKEN = /^[A-Za-z0-9][A-Za-z0-9 _-]*$/;

export class StubEncoder implements PromptEncoder {
  readonly modelName = STUB_MODEL_ID;
  readonly dim: number;

  constructor(dim: number) {
    if (!Number.isInteger(dim) || dim < 1) {
      throw new ConfigError(`encoder dim must be a positive integer, got ${dim}`);
    }
    this.dim = dim;
  }

  knowsToken(cls: string): boolean {
    return KNOWN_TOKEN.test(cls);
  }

  encodeSync(prompt: string): Float64Array {
    if (prompt.length === 0) {
      throw new DataError("cannot encode an empty prompt");
    }
    const next = splitmix32(fnv1a(prompt));
    const vec = new Float64Array(this.dim);
    for (let i = 0; i < this.dim; i++) {
      let sum = 0;
      for (let k = 0; k < 12; k++) {
        sum += next() / 4294967296;
      }
      vec[i] = sum - 6;
    }
    return vec;
  }

  encode(prompt: string): Promise<Float64Array> {
    return Promise.resolve(this.encodeSync(prompt));
  }
}

interface FeatureExtractor {
  (text: string, opts: { pooling: string; normalize: boolean }): Promise<{
    data: ArrayLike<number>;
  }>;
}

/**
 * Resolve a model identifier to an encoder.
 *
 * The stub id maps to the built-in deterministic encoder.  Any other id
 * is treated as a transformers.js model name and loaded dynamically; the
 * dependency is optional, so a missing install fails with instructions
 * rather than at import time.
 */
export async function resolveEncoder(model: string, dim: number): Promise<PromptEncoder> {
  if (model === STUB_MODEL_ID) {
    return new StubEncoder(dim);
  }
  let pipeline: (task: string, model: string) => Promise<unknown>;
  try {
    const mod = (await import("@xenova/transformers" as string)) as {
      pipeline: typeof pipeline;
    };
    pipeline = mod.pipeline;
  } catch {
    throw new ConfigError(
      `model '${model}' needs the optional '@xenova/transformers' package ` +
        `(npm install @xenova/transformers), or use --model ${STUB_MODEL_ID}`,
    );
  }
  const extractor = (await pipeline("feature-extraction", model)) as FeatureExtractor;
  return {
    modelName: model,
    dim,
    // a real tokenizer maps any string to subword units
    knowsToken: (cls: string) => cls.trim().length > 0,
    async encode(prompt: string): Promise<Float64Array> {
      const out = await extractor(prompt, { pooling: "mean", normalize: false });
      const vec = Float64Array.from(out.data as number[]);
      if (vec.length !== dim) {
        throw new DataError(
          `model '${model}' produced dim ${vec.length}, expected ${dim}`,
        );
      }
      return vec;
    },
  };
}
