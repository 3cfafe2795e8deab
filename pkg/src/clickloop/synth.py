"""Synthetic articulated stick-figure dataset for desk-scale training.

Figures are sampled as jointed 5-part chains (head, torso, arms, legs) in a
unit-height local frame, then rotated, scaled and placed on the canvas.
Limbs are drawn as thick lines and every visible joint gets a disc with a
per-keypoint color, so keypoint identity is visually recoverable.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .core import (
    COCO_17,
    BoundingBox,
    Dataset,
    ImageRecord,
    PersonInstance,
    Pose,
    Skeleton,
    Visibility,
)

__all__ = ["SynthConfig", "GenerationError", "generate_synthetic_dataset", "keypoint_palette"]


class GenerationError(RuntimeError):
    """Raised when the requested scene cannot be placed on the canvas."""


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic scene generator.

    Args:
        seed: base seed; the generator is a pure function of (config, skeleton).
        n_images: number of images to produce.
        canvas: (W, H) in pixels; multiples of 16 keep patch grids exact.
        persons_min / persons_max: inclusive range of figures per image.
        noise: std-dev in pixels of rendering noise added to disc centers
            (ground truth stays exact; 0 disables).
        occlude_prob: per-keypoint probability of marking a joint
            labeled-invisible (its disc is not drawn).
        figure_scale: (lo, hi) figure height as a fraction of canvas height.
        max_place_attempts: placement retries per figure before giving up.
    """

    seed: int = 0
    n_images: int = 100
    canvas: tuple[int, int] = (256, 256)
    persons_min: int = 1
    persons_max: int = 3
    noise: float = 0.0
    occlude_prob: float = 0.08
    figure_scale: tuple[float, float] = (0.35, 0.55)
    max_place_attempts: int = 200

    def __post_init__(self) -> None:
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if not (1 <= self.persons_min <= self.persons_max):
            raise ValueError("need 1 <= persons_min <= persons_max")
        w, h = self.canvas
        if w < 64 or h < 64:
            raise ValueError("canvas must be at least 64 x 64")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0.0 <= self.occlude_prob < 1.0:
            raise ValueError("occlude_prob must be in [0, 1)")
        lo, hi = self.figure_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("figure_scale must satisfy 0 < lo <= hi <= 1")


def keypoint_palette(n_keypoints: int) -> np.ndarray:
    """Distinct, saturated RGB color per keypoint index, shape (K, 3) uint8."""
    colors = []
    for i in range(n_keypoints):
        r, g, b = colorsys.hsv_to_rgb(i / n_keypoints, 0.95, 0.95)
        colors.append((round(r * 255), round(g * 255), round(b * 255)))
    return np.array(colors, dtype=np.uint8)


_BACKGROUND = (235, 235, 235)
_LIMB_COLOR = (45, 45, 45)

# Minimum count of labeled-visible joints per instance.
_MIN_VISIBLE = 4


def _sample_local_pose(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    """Joint positions of one figure in a unit-height frame, y growing downward.

    Figures face the viewer, so their left side sits at positive x.
    """
    hip_hw = rng.uniform(0.08, 0.12)
    shoulder_hw = rng.uniform(0.12, 0.17)
    torso = rng.uniform(0.26, 0.33)
    head_rise = rng.uniform(0.09, 0.12)
    arm_u = rng.uniform(0.15, 0.19)
    arm_f = rng.uniform(0.15, 0.19)
    leg_u = rng.uniform(0.22, 0.28)
    leg_f = rng.uniform(0.22, 0.28)

    pts: dict[str, tuple[float, float]] = {}
    pts["left_hip"] = (hip_hw, 0.0)
    pts["right_hip"] = (-hip_hw, 0.0)
    pts["left_shoulder"] = (shoulder_hw, -torso)
    pts["right_shoulder"] = (-shoulder_hw, -torso)

    nose_x = rng.uniform(-0.02, 0.02)
    nose_y = -torso - head_rise
    pts["nose"] = (nose_x, nose_y)
    pts["left_eye"] = (nose_x + 0.035, nose_y - 0.035)
    pts["right_eye"] = (nose_x - 0.035, nose_y - 0.035)
    pts["left_ear"] = (nose_x + 0.07, nose_y - 0.02)
    pts["right_ear"] = (nose_x - 0.07, nose_y - 0.02)

    for side, sign in (("left", 1.0), ("right", -1.0)):
        a1 = sign * math.radians(rng.uniform(5.0, 75.0))
        a2 = a1 + sign * math.radians(rng.uniform(-120.0, 25.0))
        sx, sy = pts[f"{side}_shoulder"]
        elbow = (sx + arm_u * math.sin(a1), sy + arm_u * math.cos(a1))
        wrist = (elbow[0] + arm_f * math.sin(a2), elbow[1] + arm_f * math.cos(a2))
        pts[f"{side}_elbow"] = elbow
        pts[f"{side}_wrist"] = wrist
        pts[f"{side}_hand"] = (wrist[0] + 0.06 * math.sin(a2), wrist[1] + 0.06 * math.cos(a2))

        l1 = sign * math.radians(rng.uniform(-8.0, 30.0))
        l2 = l1 + sign * math.radians(rng.uniform(-25.0, 12.0))
        hx, hy = pts[f"{side}_hip"]
        knee = (hx + leg_u * math.sin(l1), hy + leg_u * math.cos(l1))
        ankle = (knee[0] + leg_f * math.sin(l2), knee[1] + leg_f * math.cos(l2))
        pts[f"{side}_knee"] = knee
        pts[f"{side}_ankle"] = ankle
        pts[f"{side}_foot"] = (ankle[0] + 0.06 * math.sin(l2), ankle[1] + 0.06 * math.cos(l2))
    return pts


def _place_figure(
    local: dict[str, tuple[float, float]],
    names: tuple[str, ...],
    rng: np.random.Generator,
    canvas: tuple[int, int],
    scale_range: tuple[float, float],
    margin_px: float,
) -> np.ndarray | None:
    """Rotate, scale and translate a local pose onto the canvas.

    Returns pixel-space joints (K, 2) or None when the canvas has no room
    for this figure at the sampled scale.
    """
    cw, ch = canvas
    pts = np.array([local[n] for n in names], dtype=np.float64)
    theta = math.radians(rng.uniform(-12.0, 12.0))
    rot = np.array(
        [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
    )
    scale = rng.uniform(*scale_range) * ch
    pts = pts @ rot.T * scale

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = hi - lo
    free_x = cw - 2.0 * margin_px - span[0]
    free_y = ch - 2.0 * margin_px - span[1]
    if free_x <= 0 or free_y <= 0:
        return None
    offset = np.array(
        [
            margin_px - lo[0] + rng.uniform(0.0, free_x),
            margin_px - lo[1] + rng.uniform(0.0, free_y),
        ]
    )
    return pts + offset


def _boxes_overlap(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> bool:
    """True when IoU of two pixel-space corner boxes exceeds 0.25."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    if inter == 0.0:
        return False
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union > 0.25


def generate_synthetic_dataset(cfg: SynthConfig, skeleton: Skeleton = COCO_17) -> Dataset:
    """Render a deterministic stick-figure dataset for the given skeleton.

    Deterministic: the same (cfg, skeleton) yields bit-identical pixel
    buffers and annotations. Raises GenerationError when a sampled scene
    cannot fit persons_max figures after max_place_attempts tries.
    """
    known = set(_sample_local_pose(np.random.default_rng(0)).keys())
    missing = [n for n in skeleton.keypoint_names if n not in known]
    if missing:
        raise ValueError(f"synthesizer has no joint recipe for {missing}")

    cw, ch = cfg.canvas
    palette = keypoint_palette(skeleton.n_keypoints)
    limb_w = max(2, round(0.022 * cfg.figure_scale[1] * ch))
    disc_r = max(3, round(0.042 * cfg.figure_scale[1] * ch))
    margin = disc_r + limb_w + 2.0

    records: list[ImageRecord] = []
    next_instance_id = 1
    for img_idx in range(cfg.n_images):
        rng = np.random.default_rng([cfg.seed, img_idx])
        n_persons = int(rng.integers(cfg.persons_min, cfg.persons_max + 1))

        figures: list[np.ndarray] = []
        corner_boxes: list[tuple[float, float, float, float]] = []
        for _ in range(n_persons):
            placed = None
            for _attempt in range(cfg.max_place_attempts):
                local = _sample_local_pose(rng)
                pts = _place_figure(
                    local, skeleton.keypoint_names, rng, cfg.canvas, cfg.figure_scale, margin
                )
                if pts is None:
                    continue
                corners = (
                    pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max()
                )
                if any(_boxes_overlap(corners, other) for other in corner_boxes):
                    continue
                placed = pts
                corner_boxes.append(corners)
                break
            if placed is None:
                raise GenerationError(
                    f"could not place {n_persons} figures on a {cw}x{ch} canvas "
                    f"after {cfg.max_place_attempts} attempts (image {img_idx})"
                )
            figures.append(placed)

        # Visibility flags: occluded joints keep coordinates but lose discs.
        vis_flags: list[np.ndarray] = []
        for pts in figures:
            vis = np.full(skeleton.n_keypoints, int(Visibility.LABELED_VISIBLE), dtype=np.int64)
            occluded = rng.random(skeleton.n_keypoints) < cfg.occlude_prob
            vis[occluded] = int(Visibility.LABELED_INVISIBLE)
            n_visible = int((vis == Visibility.LABELED_VISIBLE).sum())
            if n_visible < _MIN_VISIBLE:
                hidden = np.flatnonzero(vis == Visibility.LABELED_INVISIBLE)
                revive = rng.choice(hidden, size=_MIN_VISIBLE - n_visible, replace=False)
                vis[revive] = int(Visibility.LABELED_VISIBLE)
            vis_flags.append(vis)

        img = Image.new("RGB", (cw, ch), _BACKGROUND)
        draw = ImageDraw.Draw(img)
        for pts, vis in zip(figures, vis_flags):
            render_pts = pts
            if cfg.noise > 0.0:
                render_pts = pts + rng.normal(0.0, cfg.noise, size=pts.shape)
            for a, b in skeleton.limb_edges:
                draw.line(
                    [tuple(render_pts[a]), tuple(render_pts[b])],
                    fill=_LIMB_COLOR,
                    width=limb_w,
                )
            for k in range(skeleton.n_keypoints):
                if vis[k] != Visibility.LABELED_VISIBLE:
                    continue
                x, y = render_pts[k]
                draw.ellipse(
                    (x - disc_r, y - disc_r, x + disc_r, y + disc_r),
                    fill=tuple(int(c) for c in palette[k]),
                )

        persons = []
        pad = margin / max(cw, ch)
        for pts, vis in zip(figures, vis_flags):
            coords = pts / np.array([cw, ch], dtype=np.float64)
            pose = Pose(coords=coords, visibility=vis)
            box = BoundingBox.clipped(
                cx=(coords[:, 0].min() + coords[:, 0].max()) / 2.0,
                cy=(coords[:, 1].min() + coords[:, 1].max()) / 2.0,
                w=coords[:, 0].max() - coords[:, 0].min() + 2.0 * pad,
                h=coords[:, 1].max() - coords[:, 1].min() + 2.0 * pad,
            )
            persons.append(PersonInstance(box=box, pose=pose, instance_id=next_instance_id))
            next_instance_id += 1

        pixels = np.asarray(img, dtype=np.uint8)
        records.append(ImageRecord(image_id=img_idx + 1, pixels=pixels, persons=tuple(persons)))

    return Dataset(images=tuple(records), skeleton=skeleton)
