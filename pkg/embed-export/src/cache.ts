/** The embedding-cache JSON schema the consumer reads.
 *
 * A plain object with `model_name`, `dim`, `normalized`,
 * `prompt_format_id`, and `entries` mapping each class to its vector.
 * Serialization sorts keys and indents by two, mirroring the consumer's
 * own writer.
 */

import { writeFileSync } from "node:fs";

import { DataError } from "./errors.js";

export interface EmbeddingCache {
  modelName: string;
  dim: number;
  normalized: boolean;
  promptFormatId: string;
  entries: Map<string, Float64Array>;
}

export function l2Normalize(vec: Float64Array): Float64Array {
  let sq = 0;
  for (const x of vec) {
    sq += x * x;
  }
  const norm = Math.sqrt(sq);
  if (norm < 1e-12) {
    throw new DataError("cannot normalize a zero-norm embedding");
  }
  return Float64Array.from(vec, (x) => x / norm);
}

export function serializeCache(cache: EmbeddingCache): string {
  const entries: Record<string, number[]> = {};
  for (const cls of [...cache.entries.keys()].sort()) {
    const vec = cache.entries.get(cls)!;
    if (vec.length !== cache.dim) {
      throw new DataError(`entry '${cls}' has ${vec.length} values, expected ${cache.dim}`);
    }
    for (const x of vec) {
      if (!Number.isFinite(x)) {
        throw new DataError(`entry '${cls}' contains non-finite values`);
      }
    }
    entries[cls] = Array.from(vec);
  }
  const payload = {
    dim: cache.dim,
    entries,
    model_name: cache.modelName,
    normalized: cache.normalized,
    prompt_format_id: cache.promptFormatId,
  };
  return `${JSON.stringify(payload, null, 2)}\n`;
}

export function writeCache(path: string, cache: EmbeddingCache): void {
  writeFileSync(path, serializeCache(cache));
}
