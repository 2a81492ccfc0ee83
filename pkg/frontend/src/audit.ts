/** Runtime guard for the blind protocol: the client refuses to handle any
 * server payload that could reveal which model produced a trajectory. */

const FORBIDDEN = [
  "subject",
  "baseline",
  "model",
  "finetun",
  "pretrain",
  "checkpoint",
  "a_is_subject",
  "source",
];

export class IdentityLeakError extends Error {}

function scan(value: unknown, path: string): void {
  if (typeof value === "string") {
    const low = value.toLowerCase();
    for (const needle of FORBIDDEN) {
      if (low.includes(needle)) {
        throw new IdentityLeakError(`leaky value at ${path}: "${value}"`);
      }
    }
    return;
  }
  if (Array.isArray(value)) {
    value.forEach((v, i) => scan(v, `${path}[${i}]`));
    return;
  }
  if (value !== null && typeof value === "object") {
    for (const [k, v] of Object.entries(value as Record<string, unknown>)) {
      const lowKey = k.toLowerCase();
      for (const needle of FORBIDDEN) {
        if (lowKey.includes(needle)) {
          throw new IdentityLeakError(`leaky key at ${path}.${k}`);
        }
      }
      scan(v, `${path}.${k}`);
    }
  }
}

/** Throws IdentityLeakError if any key or string value hints at a model. */
export function assertBlind(payload: unknown): void {
  scan(payload, "$");
}
