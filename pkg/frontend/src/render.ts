/** Canvas rendering: live scene, mode badge, grams, distance sparkline. */

import { UiSession, SparklinePoint } from "./session.js";

const SCENE = { x: 10, y: 10, w: 384, h: 384 };
const SPARK = { x: 10, y: 404, w: 384, h: 80 };

export function drawFrame(ctx: CanvasRenderingContext2D, session: UiSession): void {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  drawScene(ctx, session);
  drawBadge(ctx, session);
  drawSparkline(ctx, session.sparkline());
  if (!session.connected) {
    ctx.fillStyle = "rgba(20, 20, 20, 0.7)";
    ctx.fillRect(0, 0, ctx.canvas.width, ctx.canvas.height);
    ctx.fillStyle = "#ffffff";
    ctx.font = "20px sans-serif";
    ctx.fillText("disconnected - inputs disabled", SCENE.x + 60, SCENE.y + 190);
  }
}

function drawScene(ctx: CanvasRenderingContext2D, session: UiSession): void {
  ctx.fillStyle = "#101418";
  ctx.fillRect(SCENE.x, SCENE.y, SCENE.w, SCENE.h);
  const img = session.lastImage;
  if (img) {
    const [h, w] = img.shape;
    const cell = Math.min(SCENE.w / w, SCENE.h / h);
    for (let r = 0; r < h; r++) {
      for (let c = 0; c < w; c++) {
        const v = img.pixels[r * w + c];
        if (v === 0) continue;
        ctx.fillStyle = `rgb(${v},${v},${v})`;
        ctx.fillRect(SCENE.x + c * cell, SCENE.y + r * cell, cell + 0.5, cell + 0.5);
      }
    }
  } else if (session.lastState) {
    // no image subscription: schematic spoon position from the pose vector
    const [px, py] = session.lastState.pose;
    const cx = SCENE.x + ((px + 1) / 2) * SCENE.w;
    const cy = SCENE.y + (1 - (py + 1) / 2) * SCENE.h;
    ctx.strokeStyle = "#58a6ff";
    ctx.beginPath();
    ctx.arc(cx, cy, 8, 0, Math.PI * 2);
    ctx.stroke();
  }
  const s = session.lastState;
  if (s) {
    ctx.fillStyle = "#c9d1d9";
    ctx.font = "14px monospace";
    ctx.fillText(
      `tick ${s.tick}  grams ${s.grams.toFixed(1)}  carried ${s.carried}` +
        `  spilled ${s.on_table}`,
      SCENE.x, SCENE.y + SCENE.h + 16,
    );
  }
}

function drawBadge(ctx: CanvasRenderingContext2D, session: UiSession): void {
  const mode = session.mode();
  const colors = { policy: "#2ea043", operator: "#d29922", offline: "#6e7681" };
  ctx.fillStyle = colors[mode];
  ctx.fillRect(SCENE.x + SCENE.w - 110, SCENE.y + 6, 104, 26);
  ctx.fillStyle = "#0d1117";
  ctx.font = "bold 14px sans-serif";
  ctx.fillText(mode.toUpperCase(), SCENE.x + SCENE.w - 98, SCENE.y + 24);
}

function drawSparkline(ctx: CanvasRenderingContext2D,
                       points: readonly SparklinePoint[]): void {
  ctx.strokeStyle = "#30363d";
  ctx.strokeRect(SPARK.x, SPARK.y, SPARK.w, SPARK.h);
  if (points.length === 0) {
    ctx.fillStyle = "#6e7681";
    ctx.font = "12px sans-serif";
    ctx.fillText("no distance telemetry", SPARK.x + 8, SPARK.y + 20);
    return;
  }
  const max = Math.max(...points.map((p) => p.value), 1e-9);
  const sx = SPARK.w / Math.max(points.length - 1, 1);
  const toY = (v: number) => SPARK.y + SPARK.h - (v / max) * (SPARK.h - 8) - 4;

  // threshold line estimated from the flag boundary the server reports
  const flaggedVals = points.filter((p) => p.flagged).map((p) => p.value);
  if (flaggedVals.length) {
    const thr = Math.min(...flaggedVals);
    ctx.strokeStyle = "#f85149";
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo(SPARK.x, toY(thr));
    ctx.lineTo(SPARK.x + SPARK.w, toY(thr));
    ctx.stroke();
    ctx.setLineDash([]);
  }

  ctx.strokeStyle = "#58a6ff";
  ctx.beginPath();
  points.forEach((p, i) => {
    const x = SPARK.x + i * sx;
    if (i === 0) ctx.moveTo(x, toY(p.value));
    else ctx.lineTo(x, toY(p.value));
  });
  ctx.stroke();

  points.forEach((p, i) => {
    if (!p.flagged) return;
    ctx.fillStyle = "#f85149";
    ctx.fillRect(SPARK.x + i * sx - 2, toY(p.value) - 2, 4, 4);
  });

  const last = points[points.length - 1];
  ctx.fillStyle = last.flagged ? "#f85149" : "#c9d1d9";
  ctx.font = "12px monospace";
  ctx.fillText(`d_m ${last.value.toFixed(1)}`, SPARK.x + SPARK.w - 90,
               SPARK.y + 16);
}
