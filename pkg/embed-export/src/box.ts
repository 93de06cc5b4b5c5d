/** 3D box: center, dimensions, yaw.  Yaw is wrapped at construction. */

import { DataError } from "./errors.js";

const TWO_PI = 2 * Math.PI;

/**
 * Wrap an angle into (-pi, pi].
 *
 * The `%` here must behave like a floored modulus (result carries the
 * divisor's sign); JavaScript's `%` carries the dividend's sign, so
 * negative remainders are shifted up by one period.
 */
export function normalizeYaw(theta: number): number {
  const rem = (Math.PI - theta) % TWO_PI;
  return Math.PI - (rem < 0 ? rem + TWO_PI : rem);
}

export interface Box7 {
  readonly xC: number;
  readonly yC: number;
  readonly zC: number;
  readonly l: number;
  readonly w: number;
  readonly h: number;
  readonly theta: number;
}

export function makeBox(
  xC: number,
  yC: number,
  zC: number,
  l: number,
  w: number,
  h: number,
  theta: number,
): Box7 {
  for (const [name, value] of [["l", l], ["w", w], ["h", h]] as const) {
    if (!(value > 0)) {
      throw new DataError(`box dimension ${name} must be positive, got ${value}`);
    }
  }
  return Object.freeze({ xC, yC, zC, l, w, h, theta: normalizeYaw(theta) });
}
