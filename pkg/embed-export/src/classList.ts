/** Ordered ID class names, one per line; blank lines are ignored. */

import { readFileSync } from "node:fs";

import { DataError } from "./errors.js";

export function parseClassList(text: string, source: string): string[] {
  const classes = text
    .split(/\r?\n/)
    .map((line) => line.trim())
    .filter((line) => line.length > 0);
  if (classes.length === 0) {
    throw new DataError(`${source}: class list is empty`);
  }
  if (new Set(classes).size !== classes.length) {
    throw new DataError(`${source}: class list contains duplicates`);
  }
  return classes;
}

export function readClassList(path: string): string[] {
  let text: string;
  try {
    text = readFileSync(path, "utf8");
  } catch (err) {
    throw new DataError(`cannot read class list ${path}: ${(err as Error).message}`);
  }
  return parseClassList(text, path);
}
