import { STEP_SECONDS } from "./types.js";
import type { PairPayload, SceneView } from "./types.js";

/** Structural subset of CanvasRenderingContext2D so tests can record calls. */
export interface Ctx2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  globalAlpha: number;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  rect(x: number, y: number, w: number, h: number): void;
  fill(): void;
  stroke(): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  fillText(text: string, x: number, y: number): void;
}

export interface ViewTransform {
  scale: number; // pixels per meter
  originX: number; // canvas x of world (0, 0)
  originY: number;
}

/** World frame: x forward, y left. Canvas: x right, y down. */
export function worldToCanvas(
  t: ViewTransform,
  x: number,
  y: number,
): [number, number] {
  return [t.originX + x * t.scale, t.originY - y * t.scale];
}

/** Fit the lane, all agents and both trajectories into the canvas. */
export function computeViewTransform(
  pair: PairPayload,
  width: number,
  height: number,
  marginPx = 24,
): ViewTransform {
  const xs = [0];
  const ys = [0];
  for (const traj of [pair.traj_a, pair.traj_b]) {
    for (const [x, y] of traj) {
      xs.push(x);
      ys.push(y);
    }
  }
  for (const a of pair.scene.agents) {
    xs.push(a.x, a.x + a.vx * 4);
    ys.push(a.y, a.y + a.vy * 4);
  }
  ys.push(pair.scene.lane_width, -pair.scene.lane_width);
  const spanX = Math.max(10, Math.max(...xs) - Math.min(...xs));
  const spanY = Math.max(8, Math.max(...ys) - Math.min(...ys));
  const scale = Math.min(
    (width - 2 * marginPx) / spanX,
    (height - 2 * marginPx) / spanY,
  );
  return {
    scale,
    originX: marginPx - Math.min(...xs) * scale,
    originY: height - marginPx + Math.min(...ys) * scale,
  };
}

export function stepSpeeds(traj: number[][]): number[] {
  const speeds: number[] = [];
  let prev: number[] = [0, 0];
  for (const p of traj) {
    speeds.push(Math.hypot(p[0] - prev[0], p[1] - prev[1]) / STEP_SECONDS);
    prev = p;
  }
  return speeds;
}

/** Slow = blue (hue 220), fast = red (hue 0); saturates at 25 m/s. */
export function speedColor(speed: number): string {
  const frac = Math.min(1, Math.max(0, speed / 25));
  const hue = Math.round(220 * (1 - frac));
  return `hsl(${hue}, 85%, 55%)`;
}

function drawLane(ctx: Ctx2D, scene: SceneView, t: ViewTransform, width: number): void {
  const half = scene.lane_width / 2;
  const [, topY] = worldToCanvas(t, 0, half);
  const [, botY] = worldToCanvas(t, 0, -half);
  ctx.fillStyle = "#2b2f36";
  ctx.fillRect(0, topY, width, botY - topY);
  if (scene.intersection_distance !== null) {
    const [ix] = worldToCanvas(t, scene.intersection_distance, 0);
    ctx.fillStyle = "#6b5b2b";
    ctx.fillRect(ix - 2, 0, 4, 10_000);
  }
}

function drawAgents(ctx: Ctx2D, scene: SceneView, t: ViewTransform): number {
  let glyphs = 0;
  for (const agent of scene.agents) {
    const [cx, cy] = worldToCanvas(t, agent.x, agent.y);
    ctx.beginPath();
    if (agent.kind === "vru") {
      ctx.fillStyle = "#ffb347";
      ctx.arc(cx, cy, 5, 0, 2 * Math.PI);
    } else {
      ctx.fillStyle = "#c65b5b";
      ctx.rect(cx - 8, cy - 4, 16, 8);
    }
    ctx.fill();
    glyphs += 1;
    // velocity arrow: one second of motion
    const [hx, hy] = worldToCanvas(t, agent.x + agent.vx, agent.y + agent.vy);
    ctx.beginPath();
    ctx.strokeStyle = "#e8e8e8";
    ctx.lineWidth = 1.5;
    ctx.moveTo(cx, cy);
    ctx.lineTo(hx, hy);
    ctx.stroke();
  }
  return glyphs;
}

function drawTrajectory(
  ctx: Ctx2D,
  traj: number[][],
  t: ViewTransform,
  label: "A" | "B",
): void {
  const speeds = stepSpeeds(traj);
  const dashY = label === "A" ? -1 : 1; // tiny label offset, not geometry
  let prev: number[] = [0, 0];
  traj.forEach((point, i) => {
    const [x0, y0] = worldToCanvas(t, prev[0], prev[1]);
    const [x1, y1] = worldToCanvas(t, point[0], point[1]);
    ctx.beginPath();
    ctx.strokeStyle = speedColor(speeds[i]);
    ctx.lineWidth = label === "A" ? 3 : 2;
    ctx.moveTo(x0, y0);
    ctx.lineTo(x1, y1);
    ctx.stroke();
    prev = point;
  });
  const last = traj[traj.length - 1];
  const [lx, ly] = worldToCanvas(t, last[0], last[1]);
  ctx.fillStyle = "#f0f0f0";
  ctx.font = "bold 14px sans-serif";
  ctx.fillText(label, lx + 6, ly + 6 * dashY);
}

export interface RenderSummary {
  agentGlyphs: number;
  trajectoriesDrawn: number;
}

/** Draw the full bird's-eye view of one blinded pair. */
export function renderPair(
  ctx: Ctx2D,
  pair: PairPayload,
  width: number,
  height: number,
): RenderSummary {
  ctx.fillStyle = "#14161a";
  ctx.fillRect(0, 0, width, height);
  const t = computeViewTransform(pair, width, height);
  drawLane(ctx, pair.scene, t, width);
  const glyphs = drawAgents(ctx, pair.scene, t);
  // ego marker at the origin
  const [ex, ey] = worldToCanvas(t, 0, 0);
  ctx.beginPath();
  ctx.fillStyle = "#5ba8c6";
  ctx.rect(ex - 9, ey - 5, 18, 10);
  ctx.fill();
  drawTrajectory(ctx, pair.traj_a, t, "A");
  drawTrajectory(ctx, pair.traj_b, t, "B");
  return { agentGlyphs: glyphs, trajectoriesDrawn: 2 };
}
