/**
 * Console entry point: connect to a serve-mode run, stream frames, and give
 * the operator intervention, handover and labeling controls.
 */
import { ConsoleConnection } from "./connection.js";
import { ServerMessage, StateMessage } from "./protocol.js";
import { KeyboardTeleop } from "./teleop.js";
import { SuccessHistory, renderFrame, renderSparkline } from "./view.js";

const TELEOP_HZ = 20;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function main(): void {
  const frameCanvas = el<HTMLCanvasElement>("frame");
  const plotCanvas = el<HTMLCanvasElement>("plot");
  const statusEl = el<HTMLSpanElement>("status");
  const infoEl = el<HTMLSpanElement>("info");
  const logEl = el<HTMLPreElement>("log");
  const interveneBtn = el<HTMLButtonElement>("intervene");
  const handoverBtn = el<HTMLButtonElement>("handover");
  const successBtn = el<HTMLButtonElement>("label-success");
  const failureBtn = el<HTMLButtonElement>("label-failure");

  const frameCtx = frameCanvas.getContext("2d")!;
  const plotCtx = plotCanvas.getContext("2d")!;
  const teleop = new KeyboardTeleop();
  const history = new SuccessHistory();
  let intervening = false;
  let awaitingLabel = false;

  const logLine = (s: string) => {
    logEl.textContent = `${s}\n${logEl.textContent ?? ""}`.split("\n").slice(0, 12).join("\n");
  };

  const host = location.hostname || "127.0.0.1";
  const port = new URLSearchParams(location.search).get("port") ?? "8765";
  const conn = new ConsoleConnection(`ws://${host}:${port}/`, {
    onMessage: (msg: ServerMessage) => {
      if (msg.type === "hello") {
        logLine(`connected (${msg.protocol})`);
      } else if (msg.type === "frame") {
        renderFrame(frameCtx, msg);
        infoEl.textContent = `episode ${msg.episode}  t=${msg.t}  source=${msg.source}`;
      } else if (msg.type === "state") {
        handleState(msg);
      } else if (msg.type === "error") {
        logLine(`server: ${msg.message}`);
      }
    },
    onStatus: (s) => {
      statusEl.textContent = s;
      statusEl.className = s;
    },
    onProtocolError: (line) => logLine(`unparseable message: ${line.slice(0, 80)}`),
  });

  function handleState(msg: StateMessage): void {
    if (msg.phase === "awaiting_label") {
      awaitingLabel = true;
      successBtn.disabled = false;
      failureBtn.disabled = false;
      logLine("episode finished: awaiting label");
    } else if (msg.phase === "label_committed") {
      awaitingLabel = false;
      successBtn.disabled = true;
      failureBtn.disabled = true;
      const reward = Number(msg.metrics["reward"] ?? 0);
      history.record(reward > 0);
      renderSparkline(plotCtx, history.series(), plotCanvas.width, plotCanvas.height);
      logLine(`label committed (reward ${reward})`);
    } else if (msg.phase === "episode_end") {
      const label = Boolean(msg.metrics["label"]);
      history.record(label);
      renderSparkline(plotCtx, history.series(), plotCanvas.width, plotCanvas.height);
    }
    infoEl.textContent = `episodes ${msg.episode_count}  buffer ${msg.buffer_size}`;
  }

  interveneBtn.addEventListener("click", () => {
    intervening = !intervening;
    interveneBtn.textContent = intervening ? "stop intervention" : "intervene";
    interveneBtn.classList.toggle("active", intervening);
    if (!intervening) teleop.reset();
    conn.send({ type: "intervene", active: intervening });
  });
  handoverBtn.addEventListener("click", () => conn.send({ type: "handover" }));
  successBtn.addEventListener("click", () => {
    if (awaitingLabel) conn.send({ type: "label", success: true });
  });
  failureBtn.addEventListener("click", () => {
    if (awaitingLabel) conn.send({ type: "label", success: false });
  });

  window.addEventListener("keydown", (e) => {
    if (teleop.keyDown(e.key)) e.preventDefault();
  });
  window.addEventListener("keyup", (e) => teleop.keyUp(e.key));

  setInterval(() => {
    if (intervening && teleop.active()) {
      conn.send({ type: "teleop", ...teleop.axes() });
    }
  }, 1000 / TELEOP_HZ);

  conn.connect();
}

window.addEventListener("load", main);
