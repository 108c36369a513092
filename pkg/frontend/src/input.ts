/** Pointer and keyboard capture for hold-to-control teleoperation. */

export function clamp(v: number, lo = -1, hi = 1): number {
  return Math.min(hi, Math.max(lo, v));
}

/** Pointer displacement per server tick interval mapped to velocities. */
export class PointerVelocityMapper {
  gain: number;
  private lastX = 0;
  private lastY = 0;
  private accumX = 0;
  private accumY = 0;
  private tracking = false;

  constructor(gain = 1.0) {
    this.gain = gain;
  }

  begin(x: number, y: number): void {
    this.tracking = true;
    this.lastX = x;
    this.lastY = y;
    this.accumX = 0;
    this.accumY = 0;
  }

  move(x: number, y: number): void {
    if (!this.tracking) return;
    this.accumX += x - this.lastX;
    this.accumY += y - this.lastY;
    this.lastX = x;
    this.lastY = y;
  }

  end(): void {
    this.tracking = false;
    this.accumX = 0;
    this.accumY = 0;
  }

  /** Consume the accumulated displacement for one tick interval.
   * Canvas y grows downward; world y grows upward, hence the sign flip. */
  take(intervalMs: number, pxPerUnit: number): { vx: number; vy: number } {
    if (!this.tracking || intervalMs <= 0) return { vx: 0, vy: 0 };
    const scale = this.gain / (pxPerUnit * (intervalMs / 1000));
    const vx = clamp(this.accumX * scale);
    const vy = clamp(-this.accumY * scale);
    this.accumX = 0;
    this.accumY = 0;
    return { vx: vx + 0, vy: vy + 0 }; // normalize -0 away
  }
}

/** Edge-filtered hold control: one press event per physical down. */
export class HoldControl {
  private down = false;

  press(): boolean {
    if (this.down) return false; // key auto-repeat or duplicate pointerdown
    this.down = true;
    return true;
  }

  release(): boolean {
    if (!this.down) return false;
    this.down = false;
    return true;
  }

  get held(): boolean {
    return this.down;
  }
}

/** Tilt keys: scoop key tips down, dump key tips up; both cancel out. */
export class TiltKeys {
  private downKeys = new Set<string>();

  constructor(
    readonly scoopKey = "q",
    readonly dumpKey = "e",
  ) {}

  keyDown(key: string): void {
    this.downKeys.add(key.toLowerCase());
  }

  keyUp(key: string): void {
    this.downKeys.delete(key.toLowerCase());
  }

  tiltRate(): number {
    let rate = 0;
    if (this.downKeys.has(this.scoopKey)) rate -= 1;
    if (this.downKeys.has(this.dumpKey)) rate += 1;
    return rate;
  }
}

/** Arrow-key fallback for trackpads; magnitude set by the gain slider. */
export class ArrowKeys {
  private downKeys = new Set<string>();

  keyDown(key: string): void {
    this.downKeys.add(key);
  }

  keyUp(key: string): void {
    this.downKeys.delete(key);
  }

  velocity(magnitude = 0.6): { vx: number; vy: number } {
    let vx = 0;
    let vy = 0;
    if (this.downKeys.has("ArrowLeft")) vx -= 1;
    if (this.downKeys.has("ArrowRight")) vx += 1;
    if (this.downKeys.has("ArrowDown")) vy -= 1;
    if (this.downKeys.has("ArrowUp")) vy += 1;
    return { vx: clamp(vx * magnitude), vy: clamp(vy * magnitude) };
  }
}
