/**
 * Canvas rendering: the live 24x24 frame scaled up with a source-colored
 * border, plus a rolling success-rate sparkline.
 */
import { FrameMessage, decodePixels } from "./protocol.js";

export const SOURCE_COLORS: Record<string, string> = {
  vla: "#4a90d9", // base policy proposals
  rl: "#3cb371", // refined actor
  human: "#d9534f", // operator intervention
};

export function renderFrame(ctx: CanvasRenderingContext2D, frame: FrameMessage, scale = 12): void {
  const px = decodePixels(frame.pixels);
  const n = 24;
  const img = ctx.createImageData(n * scale, n * scale);
  for (let y = 0; y < n * scale; y++) {
    const sy = Math.floor(y / scale);
    for (let x = 0; x < n * scale; x++) {
      const sx = Math.floor(x / scale);
      const v = Math.round(px[sy * n + sx] * 255);
      const o = (y * n * scale + x) * 4;
      img.data[o] = v;
      img.data[o + 1] = v;
      img.data[o + 2] = v;
      img.data[o + 3] = 255;
    }
  }
  ctx.putImageData(img, 0, 0);
  ctx.strokeStyle = SOURCE_COLORS[frame.source] ?? "#999";
  ctx.lineWidth = 6;
  ctx.strokeRect(3, 3, n * scale - 6, n * scale - 6);
}

export class SuccessHistory {
  outcomes: number[] = [];
  window: number;

  constructor(window = 25) {
    this.window = window;
  }

  record(success: boolean): void {
    this.outcomes.push(success ? 1 : 0);
  }

  rate(): number | null {
    if (this.outcomes.length === 0) return null;
    const recent = this.outcomes.slice(-this.window);
    return recent.reduce((a, b) => a + b, 0) / recent.length;
  }

  /** Moving-average series for the sparkline. */
  series(): number[] {
    const out: number[] = [];
    for (let i = 0; i < this.outcomes.length; i++) {
      const lo = Math.max(0, i - this.window + 1);
      const slice = this.outcomes.slice(lo, i + 1);
      out.push(slice.reduce((a, b) => a + b, 0) / slice.length);
    }
    return out;
  }
}

export function renderSparkline(
  ctx: CanvasRenderingContext2D,
  series: number[],
  width: number,
  height: number,
): void {
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#222";
  ctx.fillRect(0, 0, width, height);
  if (series.length < 2) return;
  ctx.strokeStyle = "#3cb371";
  ctx.lineWidth = 2;
  ctx.beginPath();
  series.forEach((v, i) => {
    const x = (i / (series.length - 1)) * (width - 8) + 4;
    const y = height - 4 - v * (height - 8);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}
