import { AnnotationClient } from "./api.js";
import { renderPair } from "./render.js";
import { SessionController } from "./session.js";
import type { PairPayload, StatsPayload } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("bev");
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    throw new Error("canvas 2d context unavailable");
  }
  const banner = el<HTMLDivElement>("banner");
  const status = el<HTMLDivElement>("status");
  const controls = el<HTMLDivElement>("controls");
  const evaluator =
    new URLSearchParams(window.location.search).get("evaluator") ??
    `anon-${Math.random().toString(36).slice(2, 8)}`;

  const client = new AnnotationClient("");
  const session = new SessionController(client, evaluator, {
    onPair(pair: PairPayload) {
      banner.textContent = `judge which better matches: ${pair.style}`;
      renderPair(ctx, pair, canvas.width, canvas.height);
      controls.style.display = "block";
    },
    onDone() {
      banner.textContent = "session complete";
      controls.style.display = "none";
      ctx.fillStyle = "#14161a";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
    },
    onStats(stats: StatsPayload) {
      const boe =
        stats.provisional_boe === null
          ? "n/a"
          : stats.provisional_boe.toFixed(3);
      status.textContent =
        `evaluator ${evaluator} | ${stats.pairs_done}/${stats.pairs_total} ` +
        `pairs | provisional BOE ${boe}`;
    },
    onError(message: string) {
      status.textContent = message;
    },
  });

  el<HTMLButtonElement>("choose-a").onclick = () => void session.choose("A");
  el<HTMLButtonElement>("choose-b").onclick = () => void session.choose("B");
  el<HTMLButtonElement>("choose-tie").onclick = () =>
    void session.choose("tie");
  window.addEventListener("keydown", (ev) => {
    if (!ev.repeat) {
      session.handleKey(ev.key);
    }
  });

  void session.loadNext();
}

main();
