/**
 * Coordinate transforms between canvas pixels and the normalized [0,1]
 * space the API speaks, plus keypoint hit-testing.
 *
 * The view size is whatever the canvas currently measures, so zooming the
 * canvas changes nothing here: both directions divide and multiply by the
 * live size, keeping the round-trip error at float64 noise.
 */

import type { InstanceState } from "./api.js";

export interface ViewSize {
  width: number;
  height: number;
}

export interface PixelPoint {
  x: number;
  y: number;
}

export function toPixel(nx: number, ny: number, view: ViewSize): PixelPoint {
  return { x: nx * view.width, y: ny * view.height };
}

export function toNormalized(px: number, py: number, view: ViewSize): PixelPoint {
  // the API rejects coordinates outside [0,1]
  const clamp = (v: number) => Math.min(1, Math.max(0, v));
  return { x: clamp(px / view.width), y: clamp(py / view.height) };
}

export interface KeypointPick {
  instance: number;
  keypoint: number;
  distance: number;
}

/** Nearest keypoint to a pixel position, or null if none is within radius. */
export function pickKeypoint(
  instances: InstanceState[],
  px: number,
  py: number,
  view: ViewSize,
  radius: number,
): KeypointPick | null {
  let best: KeypointPick | null = null;
  for (const inst of instances) {
    for (let k = 0; k < inst.keypoints.length; k++) {
      const [nx, ny] = inst.keypoints[k];
      const p = toPixel(nx, ny, view);
      const d = Math.hypot(p.x - px, p.y - py);
      if (d <= radius && (best === null || d < best.distance)) {
        best = { instance: inst.index, keypoint: k, distance: d };
      }
    }
  }
  return best;
}
