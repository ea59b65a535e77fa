import { describe, expect, it, vi } from "vitest";
import { ConsoleConnection, SocketLike } from "./connection.js";
import { ServerMessage } from "./protocol.js";

class FakeSocket implements SocketLike {
  sent: string[] = [];
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;
  onopen: (() => void) | null = null;
  onerror: ((e: unknown) => void) | null = null;
  closed = false;

  send(data: string): void {
    this.sent.push(data);
  }

  close(): void {
    this.closed = true;
    this.onclose?.();
  }

  serverSays(data: string): void {
    this.onmessage?.({ data });
  }
}

function makeConnection(reconnectMs = 5) {
  const sockets: FakeSocket[] = [];
  const urls: string[] = [];
  const messages: ServerMessage[] = [];
  const badLines: string[] = [];
  const conn = new ConsoleConnection(
    "ws://x:1/",
    {
      onMessage: (m) => messages.push(m),
      onProtocolError: (line) => badLines.push(line),
    },
    (url) => {
      urls.push(url);
      const s = new FakeSocket();
      sockets.push(s);
      return s;
    },
    reconnectMs,
  );
  return { conn, sockets, urls, messages, badLines };
}

describe("ConsoleConnection", () => {
  it("parses line-delimited JSON including multi-line payloads", () => {
    const { conn, sockets, messages } = makeConnection();
    conn.connect();
    sockets[0].serverSays(
      '{"type":"hello","protocol":"rlt-hil/1","resume_token":"tok1"}\n' +
        '{"type":"error","message":"x"}\n',
    );
    expect(messages.map((m) => m.type)).toEqual(["hello", "error"]);
  });

  it("stores the resume token and reuses it on reconnect", async () => {
    vi.useFakeTimers();
    const { conn, sockets, urls } = makeConnection(10);
    conn.connect();
    sockets[0].serverSays('{"type":"hello","protocol":"rlt-hil/1","resume_token":"tok9"}\n');
    expect(conn.resumeToken).toBe("tok9");
    sockets[0].onclose?.(); // drop the transport (not user-initiated)
    await vi.advanceTimersByTimeAsync(15);
    expect(urls.length).toBe(2);
    expect(urls[1]).toContain("resume=tok9");
    vi.useRealTimers();
  });

  it("does not reconnect after an intentional close", async () => {
    vi.useFakeTimers();
    const { conn, sockets, urls } = makeConnection(10);
    conn.connect();
    conn.close();
    await vi.advanceTimersByTimeAsync(30);
    expect(urls.length).toBe(1);
    expect(sockets[0].closed).toBe(true);
    vi.useRealTimers();
  });

  it("reports malformed lines without dropping the rest", () => {
    const { conn, sockets, messages, badLines } = makeConnection();
    conn.connect();
    sockets[0].serverSays('garbage\n{"type":"error","message":"ok"}\n');
    expect(badLines).toHaveLength(1);
    expect(messages.map((m) => m.type)).toEqual(["error"]);
  });

  it("validates outbound messages before sending", () => {
    const { conn, sockets } = makeConnection();
    conn.connect();
    expect(() =>
      conn.send({ type: "teleop", dx: 4, dy: 0, dtheta: 0 } as never),
    ).toThrow();
    conn.send({ type: "intervene", active: true });
    expect(sockets[0].sent).toHaveLength(1);
    expect(JSON.parse(sockets[0].sent[0])).toEqual({ type: "intervene", active: true });
  });
});
