/** Prompt templates, character-for-character the consumer's renderers.
 *
 * The simple template names the class; the spatial template additionally
 * spells out the box geometry with two-decimal formatting, dimensions
 * width-first.  `fixtures/prompts_contract.txt` is the shared contract:
 * both components must reproduce it byte-for-byte.
 */

import { Box7 } from "./box.js";
import { DataError } from "./errors.js";
import { format2 } from "./format.js";

export const SIMPLE_FORMAT_ID = "simple-v1";
export const SPATIAL_FORMAT_ID = "spatial-v1";

export type PromptKind = "simple" | "spatial";

export function renderPrompt(kind: PromptKind, promptClass: string, box?: Box7): string {
  if (kind === "simple") {
    return `This object is a ${promptClass}.`;
  }
  if (box === undefined) {
    throw new DataError("spatial prompt rendering requires a box");
  }
  return (
    `This object is a ${promptClass} located at ` +
    `(${format2(box.xC)}, ${format2(box.yC)}, ${format2(box.zC)}), ` +
    `with dimensions (${format2(box.w)}m, ${format2(box.l)}m, ${format2(box.h)}m) ` +
    `and orientation ${format2(box.theta)} rad.`
  );
}
