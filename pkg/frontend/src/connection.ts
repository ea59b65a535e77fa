/**
 * Websocket session with line-delimited JSON framing and automatic
 * reconnection carrying the server's resume token.
 */
import {
  ClientMessage,
  ServerMessage,
  encodeClientMessage,
  parseServerLine,
  splitLines,
} from "./protocol.js";

/** Minimal socket surface so tests can inject a fake. */
export interface SocketLike {
  send(data: string): void;
  close(): void;
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onopen: (() => void) | null;
  onerror: ((e: unknown) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ConnectionEvents {
  onMessage: (msg: ServerMessage) => void;
  onStatus?: (status: "connecting" | "open" | "closed") => void;
  onProtocolError?: (line: string, error: unknown) => void;
}

export class ConsoleConnection {
  readonly url: string;
  resumeToken: string | null = null;
  private socket: SocketLike | null = null;
  private events: ConnectionEvents;
  private factory: SocketFactory;
  private reconnectDelayMs: number;
  private closedByUser = false;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    url: string,
    events: ConnectionEvents,
    factory?: SocketFactory,
    reconnectDelayMs = 1000,
  ) {
    this.url = url;
    this.events = events;
    this.factory = factory ?? ((u) => new WebSocket(u) as unknown as SocketLike);
    this.reconnectDelayMs = reconnectDelayMs;
  }

  connect(): void {
    this.closedByUser = false;
    this.events.onStatus?.("connecting");
    // Resume token travels as a query parameter so the server can associate
    // the session even before any message flows.
    const url = this.resumeToken ? `${this.url}?resume=${this.resumeToken}` : this.url;
    const sock = this.factory(url);
    this.socket = sock;
    sock.onopen = () => this.events.onStatus?.("open");
    sock.onmessage = (ev) => this.handlePayload(String(ev.data));
    sock.onerror = () => undefined;
    sock.onclose = () => {
      this.events.onStatus?.("closed");
      if (!this.closedByUser) {
        this.timer = setTimeout(() => this.connect(), this.reconnectDelayMs);
      }
    };
  }

  handlePayload(payload: string): void {
    for (const line of splitLines(payload)) {
      let msg: ServerMessage;
      try {
        msg = parseServerLine(line);
      } catch (e) {
        this.events.onProtocolError?.(line, e);
        continue;
      }
      if (msg.type === "hello") {
        this.resumeToken = msg.resume_token;
      }
      this.events.onMessage(msg);
    }
  }

  send(msg: ClientMessage): boolean {
    if (!this.socket) return false;
    this.socket.send(encodeClientMessage(msg));
    return true;
  }

  close(): void {
    this.closedByUser = true;
    if (this.timer !== null) clearTimeout(this.timer);
    this.socket?.close();
    this.socket = null;
  }
}
