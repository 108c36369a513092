/** Wire schema for the gateway session service (one JSON object per frame). */

export interface StateMsg {
  type: "state";
  tick: number;
  pose: [number, number, number];
  carried: number;
  in_target: number;
  on_table: number;
  grams: number;
  mode: "policy" | "operator";
  d_m?: number;
  flag?: boolean;
  image_b64?: string;
  image_shape?: [number, number];
}

export interface TakeoverStartedMsg {
  type: "takeover_started";
  demo_id: string;
}

export interface TakeoverEndedMsg {
  type: "takeover_ended";
  demo_id: string | null;
  steps: number;
}

export interface TrialDoneMsg {
  type: "trial_done";
  grams: number;
}

export interface ErrorMsg {
  type: "error";
  code: string;
  msg: string;
}

export interface PoliciesMsg {
  type: "policies";
  ids: string[];
}

export interface DatasetsMsg {
  type: "datasets";
  ids: string[];
}

export interface TrainingDoneMsg {
  type: "training_done";
  ok: boolean;
  policy_id: string;
  msg: string;
}

export type ServerMessage =
  | StateMsg
  | TakeoverStartedMsg
  | TakeoverEndedMsg
  | TrialDoneMsg
  | ErrorMsg
  | PoliciesMsg
  | DatasetsMsg
  | TrainingDoneMsg;

const SERVER_TYPES = new Set([
  "state", "takeover_started", "takeover_ended", "trial_done",
  "error", "policies", "datasets", "training_done",
]);

export function parseServerMessage(raw: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const msg = data as { type?: string };
  if (!msg.type || !SERVER_TYPES.has(msg.type)) return null;
  return data as ServerMessage;
}

export const clientMsg = {
  startTrial: (policyId: string, seed: number) =>
    JSON.stringify({ type: "start_trial", policy_id: policyId, seed }),
  trigger: (held: boolean) => JSON.stringify({ type: "trigger", held }),
  operatorAction: (vx: number, vy: number, tiltRate: number) =>
    JSON.stringify({ type: "operator_action", vx, vy, tilt_rate: tiltRate }),
  subscribeImage: (on: boolean) =>
    JSON.stringify({ type: "subscribe_image", on }),
  listPolicies: () => JSON.stringify({ type: "list_policies" }),
  listDatasets: () => JSON.stringify({ type: "list_datasets" }),
  startTraining: (datasetId: string) =>
    JSON.stringify({ type: "start_training", dataset_id: datasetId }),
};
