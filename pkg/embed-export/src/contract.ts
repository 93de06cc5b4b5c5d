/** The shared prompt-contract fixture, pinned.
 *
 * Ten simple prompts over the ID class list followed by three spatial
 * prompts with fixed boxes.  Both components commit an identical copy of
 * the rendered file; regenerating it here and byte-comparing against the
 * consumer's copy is the cross-component contract test.
 */

import { Box7, makeBox } from "./box.js";
import { renderPrompt } from "./prompts.js";

export const CONTRACT_CLASSES: readonly string[] = [
  "car",
  "truck",
  "construction vehicle",
  "bus",
  "trailer",
  "barrier",
  "motorcycle",
  "bicycle",
  "pedestrian",
  "traffic cone",
];

export const CONTRACT_BOXES: ReadonlyArray<[string, Box7]> = [
  ["pedestrian", makeBox(0.84, -16.86, -2.2, 0.56, 0.98, 1.62, -1.84)],
  ["car", makeBox(-12.5, 3.04, -0.75, 4.36, 1.85, 1.44, 3.14)],
  ["traffic cone", makeBox(5.0, 0.0, -1.3, 0.41, 0.41, 0.78, 0.0)],
];

export function renderContractFixture(): string {
  const lines = CONTRACT_CLASSES.map((c) => renderPrompt("simple", c));
  for (const [cls, box] of CONTRACT_BOXES) {
    lines.push(renderPrompt("spatial", cls, box));
  }
  return lines.map((line) => `${line}\n`).join("");
}
