import { assertBlind } from "./audit.js";
import type { Choice, ExportedRecord, PairPayload, StatsPayload } from "./types.js";

export class ConflictError extends Error {}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the annotation HTTP API. Every received payload
 * is audited for identity leaks before it reaches the UI. */
export class AnnotationClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = fetch,
  ) {}

  /** Next unanswered pair for this evaluator, or null when the session is
   * complete. */
  async getPair(evaluator: string): Promise<PairPayload | null> {
    const resp = await this.fetchFn(
      `${this.baseUrl}/api/pair?evaluator=${encodeURIComponent(evaluator)}`,
    );
    if (resp.status === 404) {
      return null;
    }
    if (!resp.ok) {
      throw new Error(`pair fetch failed: ${resp.status}`);
    }
    const payload = (await resp.json()) as PairPayload;
    assertBlind(payload);
    return payload;
  }

  async submitChoice(
    pairId: string,
    evaluator: string,
    choice: Choice,
  ): Promise<void> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/choice`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ pair_id: pairId, evaluator, choice }),
    });
    if (resp.status === 409) {
      throw new ConflictError(`duplicate choice for ${pairId}`);
    }
    if (!resp.ok) {
      throw new Error(`choice rejected: ${resp.status}`);
    }
  }

  async getStats(): Promise<StatsPayload> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/stats`);
    if (!resp.ok) {
      throw new Error(`stats fetch failed: ${resp.status}`);
    }
    return (await resp.json()) as StatsPayload;
  }

  /** Only succeeds once the session is closed (every pair answered). */
  async exportRecords(): Promise<ExportedRecord[]> {
    const resp = await this.fetchFn(`${this.baseUrl}/api/export`);
    if (resp.status === 409) {
      throw new ConflictError("session not complete");
    }
    if (!resp.ok) {
      throw new Error(`export failed: ${resp.status}`);
    }
    const payload = (await resp.json()) as { records: ExportedRecord[] };
    return payload.records;
  }
}
