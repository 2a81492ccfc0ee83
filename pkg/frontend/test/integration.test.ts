/** Scripted end-to-end session against the real annotation service:
 * twenty choices with a service kill/restart in the middle, then export.
 * Verifies the exported records against a hand count of the BOE
 * definition, audits every client payload for identity leaks, and checks
 * that no acknowledged choice is lost across the restart.
 */

import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { AnnotationClient } from "../src/api.js";
import { assertBlind } from "../src/audit.js";
import { betterOrEqualRates } from "../src/boe.js";
import type { Choice } from "../src/types.js";

const PORT = 18977;
const BASE = `http://127.0.0.1:${PORT}`;
const PYTHON = process.env.TRAJLAB_PYTHON ?? "python3";

let workDir: string;
let cfgPath: string;
let server: ChildProcess | null = null;

function buildRunDir(): void {
  workDir = mkdtempSync(join(tmpdir(), "trajlab-ui-"));
  cfgPath = join(workDir, "cfg.yaml");
  const cfg = [
    "seed: 3",
    `out_dir: ${join(workDir, "run")}`,
    "train_count: 60",
    "pref_count: 24",
    "eval_count: 8",
    "pretrain_steps: 40",
    "pretrain_batch: 16",
    "hidden: [16, 16]",
    "ae_epochs: 2",
    "ae_subset: 10",
    "reward_epochs: 2",
    "rl_epochs: 1",
    "refresh_epochs: 1",
    "group_size: 4",
    "eval_samples: 4",
    "mining_samples: 4",
    "annotation_pairs: 20",
    `port: ${PORT}`,
  ].join("\n");
  writeFileSync(cfgPath, cfg + "\n");
  const script = [
    "from trajlab.config import load_config",
    "from trajlab import pipeline",
    `cfg = load_config(${JSON.stringify(cfgPath)})`,
    "pipeline.cmd_gen_data(cfg)",
    "pipeline.cmd_pretrain(cfg, log_every=0)",
    "pipeline.cmd_mine(cfg, 'aggressive')",
    "pipeline.cmd_build_pairs(cfg, 'aggressive')",
    "pipeline.cmd_train_reward(cfg, 'aggressive')",
    "pipeline.cmd_finetune(cfg, 'aggressive')",
    "pipeline.cmd_refresh(cfg, 'aggressive')",
  ].join("\n");
  const out = spawnSync(PYTHON, ["-c", script], { encoding: "utf-8" });
  if (out.status !== 0) {
    throw new Error(`run dir build failed:\n${out.stdout}\n${out.stderr}`);
  }
}

async function startServer(): Promise<void> {
  server = spawn(PYTHON, [
    "-m", "trajlab.cli", "serve", "--config", cfgPath,
    "--style", "aggressive",
    "--split", join(workDir, "run", "data", "pref_aggressive.jsonl"),
    "--pairs", "20",
  ], { stdio: ["ignore", "pipe", "pipe"] });
  const client = new AnnotationClient(BASE);
  for (let i = 0; i < 150; i++) {
    try {
      await client.getStats();
      return;
    } catch {
      await new Promise((r) => setTimeout(r, 100));
    }
  }
  throw new Error("annotation service did not come up");
}

function killServer(): void {
  if (server && server.pid) {
    process.kill(server.pid, "SIGKILL");
    server = null;
  }
}

beforeAll(() => {
  buildRunDir();
}, 240_000);

afterAll(() => {
  killServer();
});

describe("scripted annotation session", () => {
  it("submits 20 choices across a restart; export matches the hand count", async () => {
    await startServer();
    const client = new AnnotationClient(BASE);
    const evaluator = "scripted-e1";
    // deterministic judgment script: A, tie, B, A, A, tie, B, A, ...
    const pattern: Choice[] = ["A", "tie", "B", "A"];
    const submitted: { pairId: string; choice: Choice }[] = [];

    for (let i = 0; i < 20; i++) {
      if (i === 10) {
        // hard kill mid-session, then restart: acknowledged choices survive
        killServer();
        await startServer();
        const stats = await client.getStats();
        expect(stats.pairs_done).toBe(10);
      }
      const pair = await client.getPair(evaluator);
      expect(pair).not.toBeNull();
      assertBlind(pair);   // belt and braces: client already audits
      const choice = pattern[i % pattern.length];
      await client.submitChoice(pair!.pair_id, evaluator, choice);
      submitted.push({ pairId: pair!.pair_id, choice });
    }

    expect(await client.getPair(evaluator)).toBeNull();   // session complete
    const stats = await client.getStats();
    expect(stats.pairs_done).toBe(20);

    // unblind from the server-side manifest (operator-only artifact)
    const manifest = JSON.parse(readFileSync(
      join(workDir, "run", "annotation", "session.json"), "utf-8"));
    const aIsSubject = new Map<string, boolean>(
      manifest.pairs.map((p: { pair_id: string; a_is_subject: boolean }) =>
        [p.pair_id, p.a_is_subject]));
    const handHs = submitted.map(({ pairId, choice }) => {
      if (choice === "tie") return 0;
      const choseA = choice === "A";
      return choseA === aIsSubject.get(pairId) ? 1 : -1;
    });
    const hand = betterOrEqualRates(handHs);

    const records = await client.exportRecords();
    expect(records.length).toBe(20);
    const exported = betterOrEqualRates(records.map((r) => r.h));
    expect(exported).toEqual(hand);
    expect(stats.provisional_boe).toBeCloseTo(hand.a, 9);

    // every record is subject-vs-baseline oriented with a known evaluator
    for (const r of records) {
      expect(r.a_src).toBe("subject");
      expect(r.b_src).toBe("baseline");
      expect(r.evaluator).toBe(evaluator);
      expect([1, 0, -1]).toContain(r.h);
    }
  });
});
