#!/usr/bin/env node
/** Command line for the exporter.
 *
 * Exit codes: 0 success, 1 export completed but classes were skipped,
 * 2 config error, 3 data error.
 */

import { writeFileSync } from "node:fs";
import { parseArgs } from "node:util";

import { writeCache } from "./cache.js";
import { readClassList } from "./classList.js";
import { renderContractFixture } from "./contract.js";
import { STUB_MODEL_ID, resolveEncoder } from "./encoder.js";
import { ConfigError, DataError } from "./errors.js";
import { exportCache } from "./export.js";

const USAGE = `usage: embed-export --classes <path> --out <path> [options]

Renders the simple prompt for every class in the list, embeds it with the
chosen text encoder, and writes the embedding-cache JSON.

options:
  --classes <path>               class list, one name per line (required)
  --out <path>                   output cache path (required)
  --model <id>                   encoder model id (default ${STUB_MODEL_ID})
  --dim <n>                      embedding dimension (default 512)
  --normalize                    L2-normalize vectors before writing
  --write-prompt-fixture <path>  write the rendered prompt-contract fixture and exit
  --help                         show this message
`;

export async function run(argv: string[]): Promise<number> {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        classes: { type: "string" },
        out: { type: "string" },
        model: { type: "string", default: STUB_MODEL_ID },
        dim: { type: "string", default: "512" },
        normalize: { type: "boolean", default: false },
        "write-prompt-fixture": { type: "string" },
        help: { type: "boolean", default: false },
      },
    });
  } catch (err) {
    process.stderr.write(`error: ${(err as Error).message}\n${USAGE}`);
    return 2;
  }
  const opts = parsed.values;
  if (opts.help) {
    process.stdout.write(USAGE);
    return 0;
  }

  try {
    const fixturePath = opts["write-prompt-fixture"];
    if (fixturePath !== undefined) {
      writeFileSync(fixturePath, renderContractFixture());
      process.stderr.write(`prompt-contract fixture written to ${fixturePath}\n`);
      return 0;
    }

    if (opts.classes === undefined || opts.out === undefined) {
      throw new ConfigError("--classes and --out are required");
    }
    const dim = Number(opts.dim);
    if (!Number.isInteger(dim) || dim < 1) {
      throw new ConfigError(`--dim must be a positive integer, got '${opts.dim}'`);
    }

    const encoder = await resolveEncoder(opts.model!, dim);
    const classes = readClassList(opts.classes);
    const { cache, skipped } = await exportCache({
      classes,
      encoder,
      normalize: opts.normalize!,
    });
    writeCache(opts.out, cache);
    process.stderr.write(
      `wrote ${cache.entries.size} embeddings (dim ${dim}, ` +
        `${cache.normalized ? "normalized" : "raw"}) to ${opts.out}\n`,
    );
    if (skipped.length > 0) {
      process.stderr.write(`${skipped.length} class(es) skipped: ${skipped.join(", ")}\n`);
      return 1;
    }
    return 0;
  } catch (err) {
    if (err instanceof ConfigError) {
      process.stderr.write(`error: ${err.message}\n`);
      return 2;
    }
    if (err instanceof DataError) {
      process.stderr.write(`error: ${err.message}\n`);
      return 3;
    }
    throw err;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined && import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  run(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
