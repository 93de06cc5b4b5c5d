import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { makeBox } from "../src/box.js";
import { renderContractFixture } from "../src/contract.js";
import { DataError } from "../src/errors.js";
import { renderPrompt } from "../src/prompts.js";

const here = fileURLToPath(new URL(".", import.meta.url));

describe("renderPrompt", () => {
  it("renders the simple template", () => {
    expect(renderPrompt("simple", "car")).toBe("This object is a car.");
    expect(renderPrompt("simple", "traffic cone")).toBe("This object is a traffic cone.");
  });

  it("renders the spatial template width-first with two decimals", () => {
    const box = makeBox(0.84, -16.86, -2.2, 0.56, 0.98, 1.62, -1.84);
    expect(renderPrompt("spatial", "pedestrian", box)).toBe(
      "This object is a pedestrian located at (0.84, -16.86, -2.20), " +
        "with dimensions (0.98m, 0.56m, 1.62m) and orientation -1.84 rad.",
    );
  });

  it("requires a box for spatial prompts", () => {
    expect(() => renderPrompt("spatial", "car")).toThrow(DataError);
  });

  it("renders wrapped yaw, not the raw input", () => {
    const box = makeBox(0, 0, 0, 1, 1, 1, 4);
    expect(renderPrompt("spatial", "car", box)).toContain("orientation -2.28 rad.");
  });
});

describe("prompt contract fixture", () => {
  it("matches this package's committed copy byte-for-byte", () => {
    const committed = readFileSync(`${here}../fixtures/prompts_contract.txt`);
    expect(Buffer.from(renderContractFixture()).equals(committed)).toBe(true);
  });

  it("matches the consumer's committed copy byte-for-byte", () => {
    const consumer = readFileSync(`${here}../../fixtures/prompts_contract.txt`);
    expect(Buffer.from(renderContractFixture()).equals(consumer)).toBe(true);
  });
});
