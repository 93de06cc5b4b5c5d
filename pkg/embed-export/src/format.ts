/** Two-decimal float formatting matching the consumer's renderer exactly. */

import { DataError } from "./errors.js";

/**
 * Format a number with exactly two decimals, rounding ties to even.
 *
 * `toFixed(2)` already rounds the exact binary value correctly except on
 * true half-cent ties, where it picks the larger candidate while the
 * consumer rounds to the even cent.  A double is a half-cent tie exactly
 * when it is an odd multiple of 1/8 (denominators with a factor of five
 * are never binary-representable), and multiplying by the powers of two
 * 8 and 4 is exact, so the tie test below is exact.
 */
export function format2(x: number): string {
  if (!Number.isFinite(x)) {
    throw new DataError(`cannot format non-finite value ${x}`);
  }
  if (Object.is(x, -0)) {
    return "-0.00";
  }
  if (Number.isInteger(x * 8) && !Number.isInteger(x * 4)) {
    const lower = Math.floor(x * 100); // x = odd/8, so x*100 = odd*12.5 exactly
    const cents = lower % 2 === 0 ? lower : lower + 1;
    const sign = cents < 0 ? "-" : "";
    const magnitude = Math.abs(cents);
    const whole = Math.trunc(magnitude / 100);
    const frac = String(magnitude % 100).padStart(2, "0");
    return `${sign}${whole}.${frac}`;
  }
  return x.toFixed(2);
}
