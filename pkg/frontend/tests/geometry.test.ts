import { describe, expect, it } from "vitest";

import type { InstanceState } from "../src/api.js";
import { pickKeypoint, toNormalized, toPixel } from "../src/geometry.js";

const ZOOMED_VIEWS = [
  { width: 256, height: 192 },
  { width: 512, height: 384 },
  { width: 768, height: 576 },
  { width: 1024, height: 768 },
  { width: 333, height: 117 }, // odd sizes stress the division
];

describe("coordinate round-trip", () => {
  it("stays under half a pixel at every zoom level", () => {
    for (const view of ZOOMED_VIEWS) {
      for (let i = 0; i <= 50; i++) {
        const px = (i / 50) * view.width;
        const py = (i / 50) * view.height;
        const n = toNormalized(px, py, view);
        const back = toPixel(n.x, n.y, view);
        expect(Math.abs(back.x - px)).toBeLessThan(0.5);
        expect(Math.abs(back.y - py)).toBeLessThan(0.5);
      }
    }
  });

  it("clamps out-of-canvas clicks into the unit square", () => {
    const view = { width: 400, height: 300 };
    expect(toNormalized(-25, 150, view)).toEqual({ x: 0, y: 0.5 });
    expect(toNormalized(500, 400, view)).toEqual({ x: 1, y: 1 });
  });
});

function instances(): InstanceState[] {
  return [
    {
      index: 0,
      score: 0.9,
      box: [0.5, 0.5, 0.8, 0.8],
      keypoints: [
        [0.25, 0.25, 0.5],
        [0.75, 0.25, 0.5],
      ],
    },
    {
      index: 1,
      score: 0.8,
      box: [0.5, 0.5, 0.8, 0.8],
      keypoints: [
        [0.25, 0.75, 0.5],
        [0.75, 0.75, 0.5],
      ],
    },
  ];
}

describe("pickKeypoint", () => {
  const view = { width: 400, height: 400 };

  it("returns the nearest keypoint within the radius", () => {
    // keypoint (1, 1) sits at pixel (300, 300)
    const hit = pickKeypoint(instances(), 304, 301, view, 12);
    expect(hit).not.toBeNull();
    expect(hit!.instance).toBe(1);
    expect(hit!.keypoint).toBe(1);
  });

  it("prefers the closer of two candidates", () => {
    // pixel (100, 200) is equidistant-ish between (100,100) and (100,300)
    const hit = pickKeypoint(instances(), 100, 190, { width: 400, height: 400 }, 1000);
    expect(hit!.instance).toBe(0);
    expect(hit!.keypoint).toBe(0);
  });

  it("misses when nothing is inside the radius", () => {
    expect(pickKeypoint(instances(), 200, 200, view, 12)).toBeNull();
  });
});
