import { AnnotationClient, ConflictError } from "./api.js";
import type { Choice, PairPayload, StatsPayload } from "./types.js";

export interface SessionHooks {
  onPair(pair: PairPayload): void;
  onDone(): void;
  onStats?(stats: StatsPayload): void;
  onError?(message: string): void;
}

/** Drives one evaluator through the pair queue: load, judge, advance.
 * The UI only advances after the server has acknowledged the choice, and a
 * duplicate-choice conflict surfaces the error and skips forward. */
export class SessionController {
  private current: PairPayload | null = null;
  private busy = false;
  readonly history: { pairId: string; choice: Choice }[] = [];

  constructor(
    private readonly client: AnnotationClient,
    readonly evaluator: string,
    private readonly hooks: SessionHooks,
  ) {}

  get currentPair(): PairPayload | null {
    return this.current;
  }

  async loadNext(): Promise<void> {
    this.current = await this.client.getPair(this.evaluator);
    if (this.current === null) {
      this.hooks.onDone();
    } else {
      this.hooks.onPair(this.current);
    }
    await this.refreshStats();
  }

  private async refreshStats(): Promise<void> {
    if (this.hooks.onStats) {
      this.hooks.onStats(await this.client.getStats());
    }
  }

  /** Submit a judgment for the loaded pair; advances only after the
   * acknowledgment arrives. */
  async choose(choice: Choice): Promise<void> {
    if (this.current === null || this.busy) {
      return;
    }
    this.busy = true;
    const pairId = this.current.pair_id;
    try {
      await this.client.submitChoice(pairId, this.evaluator, choice);
      this.history.push({ pairId, choice });
    } catch (err) {
      if (err instanceof ConflictError) {
        this.hooks.onError?.(`pair ${pairId} already answered; skipping`);
      } else {
        this.hooks.onError?.(String(err));
        this.busy = false;
        return; // keep the pair so the evaluator can retry
      }
    }
    this.busy = false;
    await this.loadNext();
  }

  /** Keyboard shortcuts a / b / t follow the identical submit path as the
   * buttons. Returns the mapped choice for testability. */
  handleKey(key: string): Choice | null {
    const mapping: Record<string, Choice> = { a: "A", b: "B", t: "tie" };
    const choice = mapping[key.toLowerCase()] ?? null;
    if (choice !== null) {
      void this.choose(choice);
    }
    return choice;
  }
}
