/**
 * Canvas overlay drawing: skeleton limbs, keypoint discs, pin markers,
 * and the selection ring. Positions come straight from the session state
 * through toPixel; nothing here moves a keypoint.
 *
 * Ctx2D is the subset of CanvasRenderingContext2D the overlay needs, so
 * tests can pass a recording stub.
 */

import { ViewSize, toPixel } from "./geometry.js";
import { pinKey, ViewState } from "./store.js";

export interface Ctx2D {
  clearRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  stroke(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fill(): void;
  lineWidth: number;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  fillStyle: string | CanvasGradient | CanvasPattern;
  globalAlpha: number;
}

export const DISC_RADIUS = 5;
export const SELECTION_RADIUS = DISC_RADIUS + 4;
export const PIN_COLOR = "#e02020";

const INSTANCE_COLORS = ["#2a9d8f", "#4a7fd4", "#e9a23b", "#9d4edd", "#52b788"];

function instanceColor(index: number): string {
  return INSTANCE_COLORS[index % INSTANCE_COLORS.length];
}

export function renderOverlay(ctx: Ctx2D, view: ViewSize, state: ViewState): void {
  ctx.clearRect(0, 0, view.width, view.height);
  const session = state.session;
  if (session === null) return;
  const pinnedSet = new Set(state.pinned);
  const edges = state.skeleton ? state.skeleton.limb_edges : [];

  for (const inst of session.instances) {
    const color = instanceColor(inst.index);

    ctx.globalAlpha = 0.8;
    ctx.strokeStyle = color;
    ctx.lineWidth = 2;
    for (const [a, b] of edges) {
      if (a >= inst.keypoints.length || b >= inst.keypoints.length) continue;
      const pa = toPixel(inst.keypoints[a][0], inst.keypoints[a][1], view);
      const pb = toPixel(inst.keypoints[b][0], inst.keypoints[b][1], view);
      ctx.beginPath();
      ctx.moveTo(pa.x, pa.y);
      ctx.lineTo(pb.x, pb.y);
      ctx.stroke();
    }

    for (let k = 0; k < inst.keypoints.length; k++) {
      const [nx, ny, conf] = inst.keypoints[k];
      const p = toPixel(nx, ny, view);
      const pinned = pinnedSet.has(pinKey(inst.index, k));
      // confidence shows as disc opacity; pinned markers are solid red
      ctx.globalAlpha = pinned ? 1 : Math.min(1, Math.max(0.15, conf));
      ctx.fillStyle = pinned ? PIN_COLOR : color;
      ctx.beginPath();
      ctx.arc(p.x, p.y, DISC_RADIUS, 0, 2 * Math.PI);
      ctx.fill();
    }
  }

  const sel = state.selection;
  if (sel !== null) {
    const inst = session.instances.find((i) => i.index === sel.instance);
    if (inst) {
      const [nx, ny] = inst.keypoints[sel.keypoint];
      const p = toPixel(nx, ny, view);
      ctx.globalAlpha = 1;
      ctx.strokeStyle = PIN_COLOR;
      ctx.lineWidth = 2;
      ctx.beginPath();
      ctx.arc(p.x, p.y, SELECTION_RADIUS, 0, 2 * Math.PI);
      ctx.stroke();
    }
  }
  ctx.globalAlpha = 1;
}
