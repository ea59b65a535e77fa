import { describe, expect, it } from "vitest";
import { KeyboardTeleop } from "./teleop.js";
import { SuccessHistory } from "./view.js";

describe("KeyboardTeleop", () => {
  it("maps arrow keys and rotation keys to axes", () => {
    const t = new KeyboardTeleop();
    t.keyDown("ArrowUp");
    t.keyDown("a");
    expect(t.axes()).toEqual({ dx: 0, dy: 1, dtheta: 1 });
    t.keyUp("ArrowUp");
    t.keyDown("ArrowDown");
    expect(t.axes().dy).toBe(-1);
  });

  it("ignores unmapped keys", () => {
    const t = new KeyboardTeleop();
    expect(t.keyDown("q")).toBe(false);
    expect(t.active()).toBe(false);
  });

  it("opposing keys cancel; axes stay clipped", () => {
    const t = new KeyboardTeleop(3);
    t.keyDown("ArrowLeft");
    t.keyDown("ArrowRight");
    expect(t.axes().dx).toBe(0);
    t.keyUp("ArrowLeft");
    expect(t.axes().dx).toBe(1); // gain 3 clipped to 1
  });

  it("reset clears held keys", () => {
    const t = new KeyboardTeleop();
    t.keyDown("ArrowUp");
    t.reset();
    expect(t.active()).toBe(false);
    expect(t.axes()).toEqual({ dx: 0, dy: 0, dtheta: 0 });
  });
});

describe("SuccessHistory", () => {
  it("tracks the rolling rate", () => {
    const h = new SuccessHistory(4);
    expect(h.rate()).toBeNull();
    [true, true, false, false].forEach((v) => h.record(v));
    expect(h.rate()).toBe(0.5);
    h.record(true);
    expect(h.rate()).toBe(0.5); // window slid: t t f f t -> last 4 = t f f t
  });

  it("series is a moving average of the outcomes", () => {
    const h = new SuccessHistory(2);
    [true, false, true].forEach((v) => h.record(v));
    expect(h.series()).toEqual([1, 0.5, 0.5]);
  });
});
