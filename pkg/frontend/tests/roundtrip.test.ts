// @vitest-environment happy-dom
/**
 * End-to-end UI pass against the fake service: load an image, make two
 * corrections with the loop on, finalize. The overlay must show exactly
 * the coordinates of the final API response, and the click counter must
 * read 2.
 */
import { readFileSync } from "node:fs";
import { join } from "node:path";

import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { boot, App } from "../src/main.js";
import { DISC_RADIUS, PIN_COLOR } from "../src/render.js";
import { FakeServer } from "./fake_server.js";

interface Disc {
  x: number;
  y: number;
  r: number;
  alpha: number;
  color: unknown;
}

/** Records what the overlay drew; clearRect starts a new frame. */
class RecordingCtx {
  discs: Disc[] = [];
  rings: Disc[] = [];
  lines: { x1: number; y1: number; x2: number; y2: number }[] = [];
  fillStyle: unknown = "#000";
  strokeStyle: unknown = "#000";
  lineWidth = 1;
  globalAlpha = 1;
  private path: { kind: "arc" | "move" | "line"; x: number; y: number; r?: number }[] = [];

  clearRect(): void {
    this.discs = [];
    this.rings = [];
    this.lines = [];
    this.path = [];
  }
  beginPath(): void {
    this.path = [];
  }
  moveTo(x: number, y: number): void {
    this.path.push({ kind: "move", x, y });
  }
  lineTo(x: number, y: number): void {
    this.path.push({ kind: "line", x, y });
  }
  arc(x: number, y: number, r: number): void {
    this.path.push({ kind: "arc", x, y, r });
  }
  fill(): void {
    for (const p of this.path) {
      if (p.kind === "arc") {
        this.discs.push({ x: p.x, y: p.y, r: p.r!, alpha: this.globalAlpha, color: this.fillStyle });
      }
    }
  }
  stroke(): void {
    let from: { x: number; y: number } | null = null;
    for (const p of this.path) {
      if (p.kind === "arc") {
        this.rings.push({ x: p.x, y: p.y, r: p.r!, alpha: this.globalAlpha, color: this.strokeStyle });
      } else if (p.kind === "move") {
        from = p;
      } else if (from) {
        this.lines.push({ x1: from.x, y1: from.y, x2: p.x, y2: p.y });
        from = p;
      }
    }
  }
}

function pageMarkup(): string {
  const html = readFileSync(join(process.cwd(), "src", "index.html"), "utf8");
  const body = html.match(/<body>([\s\S]*)<\/body>/)![1];
  return body.replace(/<script[\s\S]*?<\/script>/g, "");
}

function until(check: () => boolean, what: string): Promise<void> {
  return new Promise((resolve, reject) => {
    let tries = 0;
    const tick = () => {
      if (check()) return resolve();
      if (++tries > 200) return reject(new Error(`timed out waiting for ${what}`));
      setTimeout(tick, 1);
    };
    tick();
  });
}

let srv: FakeServer;
let ctx: RecordingCtx;
let app: App;
let finalResponse: { instances: { keypoints: [number, number, number][] }[] } | null;

beforeEach(() => {
  document.body.innerHTML = pageMarkup();
  srv = new FakeServer();
  ctx = new RecordingCtx();
  (HTMLCanvasElement.prototype as unknown as { getContext: unknown }).getContext =
    function getContext() {
      return ctx;
    };
  finalResponse = null;
  const fetchSpy = async (url: string, init?: RequestInit): Promise<Response> => {
    const resp = await srv.fetch(url, init);
    if (url.endsWith("/finalize") && resp.ok) {
      finalResponse = await resp.clone().json();
    }
    return resp;
  };
  app = boot(document, new ApiClient("", fetchSpy));
});

function clickCanvas(px: number, py: number): void {
  app.canvas.dispatchEvent(
    new MouseEvent("click", { clientX: px, clientY: py, bubbles: true }),
  );
}

function kpPixel(k: number): [number, number] {
  const inst = app.store.state.session!.instances[0];
  return [
    inst.keypoints[k][0] * app.canvas.width,
    inst.keypoints[k][1] * app.canvas.height,
  ];
}

async function loadThroughFileInput(): Promise<void> {
  const input = document.getElementById("file") as HTMLInputElement;
  const file = new File([new Uint8Array([137, 80, 78, 71])], "toy.png", {
    type: "image/png",
  });
  Object.defineProperty(input, "files", { value: [file], configurable: true });
  input.dispatchEvent(new Event("change"));
  await until(() => app.store.state.phase === "ready", "session ready");
}

describe("UI round-trip", () => {
  it("two corrections with the loop on, then finalize", async () => {
    await until(() => app.store.state.skeleton !== null, "skeleton");
    await loadThroughFileInput();
    expect(document.getElementById("click-count")!.textContent).toBe("0");

    // correction 1: select keypoint 0, place it elsewhere
    const [sx0, sy0] = kpPixel(0);
    clickCanvas(Math.round(sx0), Math.round(sy0));
    expect(app.store.state.selection).toEqual({ instance: 0, keypoint: 0 });
    clickCanvas(400, 80);
    await app.store.idle();
    expect(app.store.state.session!.loop_count).toBe(1);

    // correction 2: select keypoint 3 at its refined position
    const [sx3, sy3] = kpPixel(3);
    clickCanvas(Math.round(sx3), Math.round(sy3));
    expect(app.store.state.selection).toEqual({ instance: 0, keypoint: 3 });
    clickCanvas(100, 300);
    await app.store.idle();

    expect(document.getElementById("click-count")!.textContent).toBe("2");
    expect(document.getElementById("undo-depth")!.textContent).toBe("2");

    // finalize through its button
    (document.getElementById("finalize") as HTMLButtonElement).click();
    await app.store.idle();
    expect(finalResponse).not.toBeNull();

    // overlay discs equal the final response coordinates exactly
    const want = finalResponse!.instances[0].keypoints;
    const discs = ctx.discs.filter((d) => d.r === DISC_RADIUS);
    expect(discs).toHaveLength(want.length);
    for (let k = 0; k < want.length; k++) {
      expect(discs[k].x).toBe(want[k][0] * app.canvas.width);
      expect(discs[k].y).toBe(want[k][1] * app.canvas.height);
    }

    // corrected keypoints are drawn as red pins
    expect(discs[0].color).toBe(PIN_COLOR);
    expect(discs[3].color).toBe(PIN_COLOR);
    expect(discs[0].alpha).toBe(1);

    // counter still reads 2, badge shown, finalize disabled
    expect(document.getElementById("click-count")!.textContent).toBe("2");
    expect(document.getElementById("badge")!.hidden).toBe(false);
    expect((document.getElementById("finalize") as HTMLButtonElement).disabled).toBe(true);

    // a finalized session ignores canvas clicks entirely
    const requests = srv.requests.length;
    const discsBefore = ctx.discs.length;
    clickCanvas(Math.round(sx0), Math.round(sy0));
    clickCanvas(200, 200);
    await app.store.idle();
    expect(srv.requests.length).toBe(requests);
    expect(ctx.discs.length).toBe(discsBefore);
  });

  it("keeps the overlay equal to the response at a different zoom", async () => {
    await loadThroughFileInput();
    const zoom = document.getElementById("zoom") as HTMLSelectElement;
    zoom.value = "2";
    zoom.dispatchEvent(new Event("change"));

    const state = app.store.state.session!;
    const discs = ctx.discs.filter((d) => d.r === DISC_RADIUS);
    expect(discs).toHaveLength(state.instances[0].keypoints.length);
    for (let k = 0; k < discs.length; k++) {
      expect(discs[k].x).toBe(state.instances[0].keypoints[k][0] * app.canvas.width);
      expect(discs[k].y).toBe(state.instances[0].keypoints[k][1] * app.canvas.height);
    }
    expect(app.canvas.width).toBe(1024);
  });

  it("shows the error banner when the service is down", async () => {
    srv.down = true;
    const banner = document.getElementById("error")!;
    await app.store.loadImage(new Blob([new Uint8Array([1])]));
    expect(banner.hidden).toBe(false);
    expect(banner.textContent).toContain("service unreachable");
  });
});
