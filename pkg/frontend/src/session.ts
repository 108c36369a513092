/** Connection-side model of the operator console.
 *
 * Holds the latest server state, the distance sparkline ring and the local
 * trigger state. Everything rendered comes verbatim from the last state
 * message; the session never fabricates data, and it never sends operator
 * actions while the connection is down or the trigger is up.
 */

import {
  clientMsg,
  parseServerMessage,
  ServerMessage,
  StateMsg,
  TakeoverEndedMsg,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
}

export interface SparklinePoint {
  tick: number;
  value: number;
  flagged: boolean;
}

export interface SessionEvent {
  kind: "takeover_started" | "takeover_ended" | "trial_done" | "error" | "training_done";
  detail: string;
}

export class UiSession {
  connected = false;
  triggerHeld = false;
  lastState: StateMsg | null = null;
  lastImage: { pixels: Uint8Array; shape: [number, number] } | null = null;
  policies: string[] = [];
  datasets: string[] = [];
  events: SessionEvent[] = [];
  endedDemos: TakeoverEndedMsg[] = [];
  lastTrialGrams: number | null = null;

  private readonly ring: SparklinePoint[] = [];
  private readonly ringCapacity: number;
  private socket: SocketLike | null = null;

  constructor(ringCapacity = 120) {
    this.ringCapacity = ringCapacity;
  }

  attach(socket: SocketLike): void {
    this.socket = socket;
    this.connected = true;
  }

  onDisconnect(): void {
    this.connected = false;
    this.triggerHeld = false;
    this.socket = null;
  }

  /** Feed one raw frame from the socket. Returns the parsed message. */
  handle(raw: string): ServerMessage | null {
    const msg = parseServerMessage(raw);
    if (!msg) return null;
    switch (msg.type) {
      case "state":
        this.lastState = msg;
        if (typeof msg.d_m === "number") {
          this.ring.push({
            tick: msg.tick,
            value: msg.d_m,
            flagged: msg.flag === true,
          });
          if (this.ring.length > this.ringCapacity) this.ring.shift();
        }
        if (msg.image_b64 && msg.image_shape) {
          this.lastImage = {
            pixels: decodeBase64(msg.image_b64),
            shape: msg.image_shape,
          };
        }
        break;
      case "policies":
        this.policies = msg.ids;
        break;
      case "datasets":
        this.datasets = msg.ids;
        break;
      case "takeover_started":
        this.events.push({ kind: "takeover_started", detail: msg.demo_id });
        break;
      case "takeover_ended":
        this.endedDemos.push(msg);
        this.events.push({
          kind: "takeover_ended",
          detail: `${msg.demo_id ?? "(discarded)"} ${msg.steps} steps`,
        });
        break;
      case "trial_done":
        this.lastTrialGrams = msg.grams;
        this.events.push({ kind: "trial_done", detail: `${msg.grams} g` });
        break;
      case "training_done":
        this.events.push({
          kind: "training_done",
          detail: msg.ok ? msg.policy_id : `failed: ${msg.msg}`,
        });
        break;
      case "error":
        this.events.push({ kind: "error", detail: `${msg.code}: ${msg.msg}` });
        break;
    }
    return msg;
  }

  /** Mode badge value; always verbatim from the server. */
  mode(): "policy" | "operator" | "offline" {
    if (!this.connected) return "offline";
    return this.lastState?.mode ?? "policy";
  }

  sparkline(): readonly SparklinePoint[] {
    return this.ring;
  }

  // -- outgoing ---------------------------------------------------------------

  /** One trigger{held:true} per physical press; repeats are ignored. */
  pressTrigger(): boolean {
    if (!this.connected || this.triggerHeld || !this.socket) return false;
    this.triggerHeld = true;
    this.socket.send(clientMsg.trigger(true));
    return true;
  }

  releaseTrigger(): boolean {
    if (!this.triggerHeld) return false;
    this.triggerHeld = false;
    if (this.connected && this.socket) {
      this.socket.send(clientMsg.trigger(false));
      return true;
    }
    return false;
  }

  /** Drops the action unless connected and actively holding. */
  sendOperatorAction(vx: number, vy: number, tiltRate: number): boolean {
    if (!this.connected || !this.triggerHeld || !this.socket) return false;
    this.socket.send(clientMsg.operatorAction(vx, vy, tiltRate));
    return true;
  }

  startTrial(policyId: string, seed: number): void {
    this.socket?.send(clientMsg.startTrial(policyId, seed));
  }

  startTraining(datasetId: string): void {
    this.socket?.send(clientMsg.startTraining(datasetId));
  }

  refreshListings(): void {
    this.socket?.send(clientMsg.listPolicies());
    this.socket?.send(clientMsg.listDatasets());
  }

  subscribeImage(on: boolean): void {
    this.socket?.send(clientMsg.subscribeImage(on));
  }
}

function decodeBase64(data: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(data);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return Uint8Array.from(Buffer.from(data, "base64"));
}
