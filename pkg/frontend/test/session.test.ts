import { describe, expect, it } from "vitest";

import { UiSession, SocketLike } from "../src/session.js";
import { parseServerMessage } from "../src/protocol.js";

class FakeSocket implements SocketLike {
  sent: string[] = [];
  send(data: string): void {
    this.sent.push(data);
  }
  close(): void {}
  types(): string[] {
    return this.sent.map((s) => JSON.parse(s).type);
  }
}

function stateMsg(tick: number, extra: Record<string, unknown> = {}): string {
  return JSON.stringify({
    type: "state", tick, pose: [5.5, 5.7, 0.0], carried: 0,
    in_target: 0, on_table: 0, grams: 0.0, mode: "policy", ...extra,
  });
}

function connected(): { s: UiSession; sock: FakeSocket } {
  const s = new UiSession(5);
  const sock = new FakeSocket();
  s.attach(sock);
  return { s, sock };
}

describe("parseServerMessage", () => {
  it("rejects garbage and unknown types", () => {
    expect(parseServerMessage("not json")).toBeNull();
    expect(parseServerMessage('{"no_type": 1}')).toBeNull();
    expect(parseServerMessage('{"type": "mystery"}')).toBeNull();
    expect(parseServerMessage(stateMsg(3))!.type).toBe("state");
  });
});

describe("UiSession state tracking", () => {
  it("renders quantities verbatim from the latest state", () => {
    const { s } = connected();
    s.handle(stateMsg(7, { grams: 12.5, mode: "operator" }));
    expect(s.lastState!.tick).toBe(7);
    expect(s.lastState!.grams).toBe(12.5);
    expect(s.mode()).toBe("operator");
    s.handle(stateMsg(8, { mode: "policy" }));
    expect(s.mode()).toBe("policy");
  });

  it("mode reads offline when disconnected", () => {
    const { s } = connected();
    s.handle(stateMsg(1, { mode: "operator" }));
    s.onDisconnect();
    expect(s.mode()).toBe("offline");
  });

  it("sparkline keeps only the most recent N distances", () => {
    const { s } = connected();
    for (let t = 1; t <= 100; t++) {
      s.handle(stateMsg(t, { d_m: t * 1.0, flag: t % 10 === 0 }));
    }
    const ring = s.sparkline();
    expect(ring.length).toBe(5);
    expect(ring.map((p) => p.value)).toEqual([96, 97, 98, 99, 100]);
    expect(ring.find((p) => p.tick === 100)!.flagged).toBe(true);
  });

  it("states without d_m add no sparkline points", () => {
    const { s } = connected();
    s.handle(stateMsg(1));
    expect(s.sparkline().length).toBe(0);
  });

  it("collects listings and events", () => {
    const { s } = connected();
    s.handle(JSON.stringify({ type: "policies", ids: ["a", "b"] }));
    s.handle(JSON.stringify({ type: "datasets", ids: ["live"] }));
    s.handle(JSON.stringify({ type: "takeover_started", demo_id: "live-1" }));
    s.handle(JSON.stringify({ type: "takeover_ended", demo_id: "live-1", steps: 9 }));
    s.handle(JSON.stringify({ type: "error", code: "x", msg: "boom" }));
    expect(s.policies).toEqual(["a", "b"]);
    expect(s.datasets).toEqual(["live"]);
    expect(s.endedDemos.length).toBe(1);
    expect(s.events.map((e) => e.kind)).toContain("error");
  });
});

describe("UiSession outgoing guarantees", () => {
  it("exactly one trigger per physical press", () => {
    const { s, sock } = connected();
    expect(s.pressTrigger()).toBe(true);
    expect(s.pressTrigger()).toBe(false);
    expect(s.pressTrigger()).toBe(false);
    expect(s.releaseTrigger()).toBe(true);
    expect(s.releaseTrigger()).toBe(false);
    const triggers = sock.sent.filter((m) => JSON.parse(m).type === "trigger");
    expect(triggers.map((m) => JSON.parse(m).held)).toEqual([true, false]);
  });

  it("operator actions flow only while held", () => {
    const { s, sock } = connected();
    expect(s.sendOperatorAction(0.5, 0, 0)).toBe(false);
    s.pressTrigger();
    expect(s.sendOperatorAction(0.5, 0, 0)).toBe(true);
    s.releaseTrigger();
    expect(s.sendOperatorAction(0.5, 0, 0)).toBe(false);
    expect(sock.types()).toEqual(["trigger", "operator_action", "trigger"]);
  });

  it("never synthesizes actions while the connection is lost", () => {
    const { s, sock } = connected();
    s.pressTrigger();
    s.onDisconnect();
    expect(s.sendOperatorAction(0.3, 0.3, 0)).toBe(false);
    expect(s.triggerHeld).toBe(false);
    expect(sock.types()).toEqual(["trigger"]);
  });

  it("trigger release after disconnect sends nothing", () => {
    const { s, sock } = connected();
    s.pressTrigger();
    const sentBefore = sock.sent.length;
    s.onDisconnect();
    expect(s.releaseTrigger()).toBe(false);
    expect(sock.sent.length).toBe(sentBefore);
  });

  it("session controls serialize the documented wire messages", () => {
    const { s, sock } = connected();
    s.startTrial("pilot", 7);
    s.startTraining("live");
    s.refreshListings();
    s.subscribeImage(true);
    const types = sock.types();
    expect(types).toEqual([
      "start_trial", "start_training", "list_policies", "list_datasets",
      "subscribe_image",
    ]);
    expect(JSON.parse(sock.sent[0])).toEqual(
      { type: "start_trial", policy_id: "pilot", seed: 7 });
  });
});
