/**
 * Wire protocol for the supervision console: line-delimited JSON messages
 * over a websocket, protocol version "rlt-hil/1".
 *
 * Outbound (server -> client): hello, frame, state, error.
 * Inbound  (client -> server): intervene, teleop, label, handover.
 */
import { z } from "zod";

export const PROTOCOL_VERSION = "rlt-hil/1";

export const PixelsSchema = z.object({
  encoding: z.enum(["u8", "f32"]),
  data: z.string(),
});

export const HelloSchema = z.object({
  type: z.literal("hello"),
  protocol: z.string(),
  resume_token: z.string(),
});

export const FrameSchema = z.object({
  type: z.literal("frame"),
  episode: z.number().int().nonnegative(),
  t: z.number().int().nonnegative(),
  pixels: PixelsSchema,
  proprio: z.array(z.number()).length(6),
  source: z.enum(["vla", "rl", "human"]),
  reward: z.number(),
});

export const StateSchema = z.object({
  type: z.literal("state"),
  phase: z.string(),
  episode_count: z.number().int().nonnegative(),
  buffer_size: z.number().int().nonnegative(),
  metrics: z.record(z.unknown()),
});

export const ErrorSchema = z.object({
  type: z.literal("error"),
  message: z.string(),
});

export const ServerMessageSchema = z.discriminatedUnion("type", [
  HelloSchema,
  FrameSchema,
  StateSchema,
  ErrorSchema,
]);

export type ServerMessage = z.infer<typeof ServerMessageSchema>;
export type FrameMessage = z.infer<typeof FrameSchema>;
export type StateMessage = z.infer<typeof StateSchema>;

const axis = z.number().gte(-1).lte(1);

export const InterveneSchema = z.object({
  type: z.literal("intervene"),
  active: z.boolean(),
});

export const TeleopSchema = z.object({
  type: z.literal("teleop"),
  dx: axis,
  dy: axis,
  dtheta: axis,
});

export const LabelSchema = z.object({
  type: z.literal("label"),
  success: z.boolean(),
});

export const HandoverSchema = z.object({ type: z.literal("handover") });

export const ClientMessageSchema = z.discriminatedUnion("type", [
  InterveneSchema,
  TeleopSchema,
  LabelSchema,
  HandoverSchema,
]);

export type ClientMessage = z.infer<typeof ClientMessageSchema>;

/** Parse one line of server output; throws on schema violations. */
export function parseServerLine(line: string): ServerMessage {
  return ServerMessageSchema.parse(JSON.parse(line));
}

/** Split a websocket text payload into complete JSON lines. */
export function splitLines(payload: string): string[] {
  return payload
    .split("\n")
    .map((s) => s.trim())
    .filter((s) => s.length > 0);
}

export function encodeClientMessage(msg: ClientMessage): string {
  ClientMessageSchema.parse(msg);
  return JSON.stringify(msg) + "\n";
}

export function clipAxis(v: number): number {
  if (Number.isNaN(v)) return 0;
  return Math.min(1, Math.max(-1, v));
}

function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  // Node (tests)
  return new Uint8Array(Buffer.from(b64, "base64"));
}

/** Decode transported pixels into a Float32Array of length 576 in [0, 1]. */
export function decodePixels(pixels: z.infer<typeof PixelsSchema>): Float32Array {
  const bytes = base64ToBytes(pixels.data);
  if (pixels.encoding === "f32") {
    return new Float32Array(bytes.buffer, bytes.byteOffset, bytes.byteLength / 4).slice();
  }
  const out = new Float32Array(bytes.length);
  for (let i = 0; i < bytes.length; i++) out[i] = bytes[i] / 255;
  return out;
}
