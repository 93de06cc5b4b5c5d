/** The export pipeline: class list -> prompts -> encoder -> cache JSON. */

import { EmbeddingCache, l2Normalize } from "./cache.js";
import { PromptEncoder } from "./encoder.js";
import { SIMPLE_FORMAT_ID, renderPrompt } from "./prompts.js";

export interface ExportRequest {
  /** Ordered ID class names. */
  classes: string[];
  encoder: PromptEncoder;
  /** L2-normalize each vector before writing. */
  normalize: boolean;
  /** Warnings and progress lines land here; defaults to stderr. */
  log?: (line: string) => void;
}

export interface ExportResult {
  cache: EmbeddingCache;
  /** Classes the encoder's vocabulary rejected, in input order. */
  skipped: string[];
}

function cosine(a: Float64Array, b: Float64Array): number {
  let dot = 0;
  let na = 0;
  let nb = 0;
  for (let i = 0; i < a.length; i++) {
    dot += a[i]! * b[i]!;
    na += a[i]! * a[i]!;
    nb += b[i]! * b[i]!;
  }
  return dot / Math.sqrt(na * nb);
}

/**
 * Encode the simple prompt of every class and assemble the cache.
 *
 * Unknown class tokens are skipped with a warning rather than aborting
 * the export; callers decide what a partial cache is worth (the CLI exits
 * nonzero).  When the classic trio is present, the pairwise cosines are
 * logged as a semantic sanity signal — informational only, since stub
 * vectors carry none.
 */
export async function exportCache(req: ExportRequest): Promise<ExportResult> {
  const log = req.log ?? ((line: string) => process.stderr.write(`${line}\n`));
  const entries = new Map<string, Float64Array>();
  const skipped: string[] = [];
  for (const cls of req.classes) {
    if (!req.encoder.knowsToken(cls)) {
      log(`warning: class '${cls}' is outside the encoder vocabulary; skipped`);
      skipped.push(cls);
      continue;
    }
    const raw = await req.encoder.encode(renderPrompt("simple", cls));
    entries.set(cls, req.normalize ? l2Normalize(raw) : raw);
  }

  const trio = ["car", "truck", "pedestrian"].map((c) => entries.get(c));
  if (trio.every((v) => v !== undefined)) {
    const [car, truck, pedestrian] = trio as [Float64Array, Float64Array, Float64Array];
    log(
      `sanity: cos(car,truck)=${cosine(car, truck).toFixed(4)} ` +
        `cos(car,pedestrian)=${cosine(car, pedestrian).toFixed(4)} ` +
        `(expected ordering holds only for real encoders)`,
    );
  }

  return {
    cache: {
      modelName: req.encoder.modelName,
      dim: req.encoder.dim,
      normalized: req.normalize,
      promptFormatId: SIMPLE_FORMAT_ID,
      entries,
    },
    skipped,
  };
}
