/** Browser bootstrap: wires the socket, inputs and canvas together. */

import { ArrowKeys, HoldControl, PointerVelocityMapper, TiltKeys } from "./input.js";
import { drawFrame } from "./render.js";
import { UiSession } from "./session.js";

const TICK_MS = 100; // matches the default gateway rate; actions sent per tick
const PX_PER_UNIT = 35;

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function main(): void {
  const canvas = el<HTMLCanvasElement>("console-canvas");
  const ctx = canvas.getContext("2d")!;
  const session = new UiSession();
  const mapper = new PointerVelocityMapper(1.0);
  const hold = new HoldControl();
  const tilt = new TiltKeys();
  const arrows = new ArrowKeys();
  let socket: WebSocket | null = null;

  const status = el<HTMLSpanElement>("status");
  const log = el<HTMLPreElement>("event-log");

  function connect(): void {
    const url = el<HTMLInputElement>("server-url").value;
    socket?.close();
    socket = new WebSocket(url);
    socket.onopen = () => {
      session.attach({
        send: (d) => socket?.send(d),
        close: () => socket?.close(),
      });
      status.textContent = `connected to ${url}`;
      session.subscribeImage(true);
      session.refreshListings();
    };
    socket.onmessage = (ev) => {
      session.handle(String(ev.data));
      refreshListings();
      log.textContent = session.events.slice(-8).map(
        (e) => `${e.kind}: ${e.detail}`).join("\n");
    };
    socket.onclose = () => {
      session.onDisconnect();
      status.textContent = "disconnected";
    };
  }

  function refreshListings(): void {
    const policySelect = el<HTMLSelectElement>("policy-select");
    if (policySelect.options.length !== session.policies.length) {
      policySelect.innerHTML = session.policies
        .map((p) => `<option value="${p}">${p}</option>`).join("");
    }
    const datasetSelect = el<HTMLSelectElement>("dataset-select");
    if (datasetSelect.options.length !== session.datasets.length) {
      datasetSelect.innerHTML = session.datasets
        .map((d) => `<option value="${d}">${d}</option>`).join("");
    }
  }

  el<HTMLButtonElement>("connect").onclick = connect;
  el<HTMLButtonElement>("start-trial").onclick = () => {
    const policy = el<HTMLSelectElement>("policy-select").value;
    const seed = Number(el<HTMLInputElement>("seed").value) || 0;
    if (policy) session.startTrial(policy, seed);
  };
  el<HTMLButtonElement>("start-training").onclick = () => {
    const dataset = el<HTMLSelectElement>("dataset-select").value;
    if (dataset) session.startTraining(dataset);
  };
  el<HTMLButtonElement>("refresh").onclick = () => session.refreshListings();

  // hold-to-control: pointer down on the canvas seizes control
  canvas.addEventListener("pointerdown", (ev) => {
    canvas.setPointerCapture(ev.pointerId);
    mapper.begin(ev.clientX, ev.clientY);
    if (hold.press()) session.pressTrigger();
  });
  canvas.addEventListener("pointermove", (ev) => {
    mapper.move(ev.clientX, ev.clientY);
  });
  const endHold = () => {
    mapper.end();
    if (hold.release()) session.releaseTrigger();
  };
  canvas.addEventListener("pointerup", endHold);
  canvas.addEventListener("pointercancel", endHold);

  window.addEventListener("keydown", (ev) => {
    if (ev.repeat) return; // one press per physical key-down
    if (ev.key === " ") {
      if (hold.press()) session.pressTrigger();
    }
    tilt.keyDown(ev.key);
    arrows.keyDown(ev.key);
  });
  window.addEventListener("keyup", (ev) => {
    if (ev.key === " ") {
      if (hold.release()) session.releaseTrigger();
    }
    tilt.keyUp(ev.key);
    arrows.keyUp(ev.key);
  });

  el<HTMLInputElement>("gain").oninput = (ev) => {
    mapper.gain = Number((ev.target as HTMLInputElement).value);
  };

  // one operator action per server tick interval while holding
  setInterval(() => {
    if (!session.triggerHeld) return;
    const { vx, vy } = mapper.take(TICK_MS, PX_PER_UNIT);
    const keys = arrows.velocity();
    session.sendOperatorAction(
      Math.max(-1, Math.min(1, vx + keys.vx)),
      Math.max(-1, Math.min(1, vy + keys.vy)),
      tilt.tiltRate(),
    );
  }, TICK_MS);

  function frame(): void {
    drawFrame(ctx, session);
    requestAnimationFrame(frame);
  }
  requestAnimationFrame(frame);
}

window.addEventListener("DOMContentLoaded", main);
