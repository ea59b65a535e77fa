/**
 * Keyboard teleoperation: held keys map to per-step action axes, streamed
 * as teleop messages while an intervention is active. Axes are clipped
 * client-side; the server buffers them and consumes a chunk per boundary.
 */
import { clipAxis } from "./protocol.js";

export interface TeleopAxes {
  dx: number;
  dy: number;
  dtheta: number;
}

const KEY_AXES: Record<string, Partial<TeleopAxes>> = {
  ArrowLeft: { dx: -1 },
  ArrowRight: { dx: 1 },
  ArrowUp: { dy: 1 },
  ArrowDown: { dy: -1 },
  a: { dtheta: 1 },
  d: { dtheta: -1 },
};

export class KeyboardTeleop {
  private held = new Set<string>();
  gain: number;

  constructor(gain = 1.0) {
    this.gain = gain;
  }

  keyDown(key: string): boolean {
    if (!(key in KEY_AXES)) return false;
    this.held.add(key);
    return true;
  }

  keyUp(key: string): void {
    this.held.delete(key);
  }

  reset(): void {
    this.held.clear();
  }

  /** Current axes from all held keys, summed and clipped to [-1, 1]. */
  axes(): TeleopAxes {
    let dx = 0;
    let dy = 0;
    let dtheta = 0;
    for (const key of this.held) {
      const a = KEY_AXES[key];
      dx += a.dx ?? 0;
      dy += a.dy ?? 0;
      dtheta += a.dtheta ?? 0;
    }
    return {
      dx: clipAxis(dx * this.gain),
      dy: clipAxis(dy * this.gain),
      dtheta: clipAxis(dtheta * this.gain),
    };
  }

  active(): boolean {
    return this.held.size > 0;
  }
}
