/** Better-or-equal rates from a list of h judgments (hand count of the
 * definition: ties count for both sides). */
export function betterOrEqualRates(hs: number[]): { a: number; b: number } {
  if (hs.length === 0) {
    throw new Error("no judgments");
  }
  const a = hs.filter((h) => h >= 0).length / hs.length;
  const b = hs.filter((h) => h <= 0).length / hs.length;
  return { a, b };
}
