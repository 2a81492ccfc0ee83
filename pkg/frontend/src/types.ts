export interface AgentView {
  x: number;
  y: number;
  vx: number;
  vy: number;
  kind: "vehicle" | "vru";
}

export interface SceneView {
  lane_width: number;
  ego_speed: number;
  intersection_distance: number | null;
  agents: AgentView[];
}

/** Exactly what the service exposes per pair: no model identity anywhere. */
export interface PairPayload {
  pair_id: string;
  style: string;
  scene: SceneView;
  traj_a: number[][];
  traj_b: number[][];
}

export interface StatsPayload {
  pairs_total: number;
  pairs_done: number;
  provisional_boe: number | null;
}

export interface ExportedRecord {
  scenario_id: string;
  a_src: string;
  b_src: string;
  h: -1 | 0 | 1;
  evaluator: string;
}

export type Choice = "A" | "B" | "tie";

export const STEP_SECONDS = 0.5;
