"""Shared test fixtures: independent oracles and scripted engines.

The oracles here are deliberately written straight from the definitions
(exhaustive permutation search, literal similarity formula) so they share no
code path with the implementations they check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from clickloop.core import (
    COCO_17,
    BoundingBox,
    Dataset,
    ImageRecord,
    PersonInstance,
    Pose,
    Visibility,
)
from clickloop.model import ModelConfig


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        channel_dim=32,
        n_human_queries=5,
        n_encoder_layers=1,
        n_human_layers=1,
        n_h2k_layers=2,
        patch_size=16,
        n_heads=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


# -- assignment oracle -------------------------------------------------------


def brute_force_match(cost: np.ndarray, tol_scale: float = 1e-9):
    """Exhaustive minimum-cost assignment with the deterministic tie-break:
    among assignments within tol of the optimum, the lexicographically
    smallest pair list (sorted by prediction index) wins."""
    m, g = cost.shape
    assert m >= g
    best_total = math.inf
    totals = []
    for preds in itertools.permutations(range(m), g):
        total = sum(cost[p, gt] for gt, p in enumerate(preds))
        totals.append((total, preds))
        best_total = min(best_total, total)
    tol = tol_scale * (1.0 + abs(best_total))
    candidates = [
        tuple(sorted((p, gt) for gt, p in enumerate(preds)))
        for total, preds in totals
        if total <= best_total + tol
    ]
    return min(candidates), best_total


# -- OKS oracle ----------------------------------------------------------------


def oks_oracle(
    pred_coords: np.ndarray,
    gt_coords: np.ndarray,
    visibility: np.ndarray,
    box_area: float,
    sigmas: np.ndarray,
) -> float:
    """Literal similarity formula, scalar loop, no shared code."""
    total, count = 0.0, 0
    for i in range(len(gt_coords)):
        if int(visibility[i]) == 0:
            continue
        dx = float(pred_coords[i][0]) - float(gt_coords[i][0])
        dy = float(pred_coords[i][1]) - float(gt_coords[i][1])
        total += math.exp(-(dx * dx + dy * dy) / (2.0 * box_area * float(sigmas[i]) ** 2))
        count += 1
    if count == 0:
        raise ValueError("no labeled keypoints")
    return total / count


# -- scripted datasets and engines --------------------------------------------


def make_person(coords: np.ndarray, instance_id=1, pad: float = 0.05) -> PersonInstance:
    coords = np.asarray(coords, dtype=np.float64)
    vis = np.full(len(coords), int(Visibility.LABELED_VISIBLE))
    x1, y1 = coords.min(axis=0) - pad
    x2, y2 = coords.max(axis=0) + pad
    box = BoundingBox.clipped((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)
    return PersonInstance(box=box, pose=Pose(coords=coords, visibility=vis), instance_id=instance_id)


def grid_pose(k: int = 17, origin=(0.3, 0.3), span: float = 0.4) -> np.ndarray:
    g = math.ceil(math.sqrt(k))
    pts = [
        (origin[0] + span * (i % g) / max(g - 1, 1), origin[1] + span * (i // g) / max(g - 1, 1))
        for i in range(k)
    ]
    return np.asarray(pts, dtype=np.float64)


def tiny_dataset(n_images: int = 2, k: int = 17) -> Dataset:
    images = []
    for i in range(n_images):
        coords = grid_pose(k, origin=(0.2 + 0.02 * i, 0.25), span=0.45)
        person = make_person(coords, instance_id=i + 1)
        # distinct pixel buffers: engines key sessions by pixel content
        pixels = np.full((64, 64, 3), i + 1, dtype=np.uint8)
        images.append(ImageRecord(image_id=i + 1, pixels=pixels, persons=(person,)))
    return Dataset(images=tuple(images), skeleton=COCO_17)


class ScriptedSession:
    """Session stub with pluggable click/loop behavior."""

    def __init__(self, poses: np.ndarray, clicks_move_pose: bool = True):
        self._poses = np.array(poses, dtype=np.float64)  # (N, K, 2)
        self.clicks_move_pose = clicks_move_pose
        self.click_log: list[tuple[int, int, float, float]] = []
        self.loop_calls = 0

    def poses_numpy(self) -> np.ndarray:
        return self._poses.copy()

    def scores_numpy(self) -> np.ndarray:
        return np.ones(len(self._poses))

    def kpt_scores_numpy(self) -> np.ndarray:
        return np.full(self._poses.shape[:2], 0.5)

    def click(self, instance_index: int, keypoint_index: int, x: float, y: float):
        self.click_log.append((instance_index, keypoint_index, x, y))
        if self.clicks_move_pose:
            self._poses[instance_index, keypoint_index] = (x, y)
        return self

    def loop_refine(self):
        self.loop_calls += 1
        return self


class PerfectEngine:
    """Sessions start on the GT poses (optionally offset); clicks land exactly."""

    def __init__(self, dataset: Dataset, start_offset: float = 0.0):
        self._by_image = {
            im.image_id: np.clip(
                np.stack([p.pose.coords for p in im.persons]) + start_offset, 0.0, 1.0
            )
            for im in dataset
        }
        self._pixel_key = {im.pixels.tobytes(): im.image_id for im in dataset}

    def start(self, pixels: np.ndarray) -> ScriptedSession:
        image_id = self._pixel_key[np.asarray(pixels).tobytes()]
        return ScriptedSession(self._by_image[image_id])


class StubbornEngine:
    """Sessions never improve: poses stay wrong and ignore every click."""

    def __init__(self, dataset: Dataset, offset: float = 0.49):
        self._by_image = {
            im.image_id: np.clip(
                np.stack([p.pose.coords for p in im.persons]) + offset, 0.0, 1.0
            )
            for im in dataset
        }
        self._pixel_key = {im.pixels.tobytes(): im.image_id for im in dataset}

    def start(self, pixels: np.ndarray) -> ScriptedSession:
        image_id = self._pixel_key[np.asarray(pixels).tobytes()]
        return ScriptedSession(self._by_image[image_id], clicks_move_pose=False)


class KBrokenEngine:
    """Exactly k keypoints per person start far off; each click fixes one."""

    def __init__(self, dataset: Dataset, k_broken: int):
        self.k_broken = k_broken
        self._by_image = {}
        for im in dataset:
            poses = np.stack([p.pose.coords for p in im.persons]).astype(np.float64)
            for n in range(len(poses)):
                for j in range(k_broken):
                    # push to the farthest corner so the broken term is ~0
                    x, y = poses[n, j]
                    poses[n, j] = (0.0 if x > 0.5 else 1.0, 0.0 if y > 0.5 else 1.0)
            self._by_image[im.image_id] = poses
        self._pixel_key = {im.pixels.tobytes(): im.image_id for im in dataset}

    def start(self, pixels: np.ndarray) -> ScriptedSession:
        image_id = self._pixel_key[np.asarray(pixels).tobytes()]
        return ScriptedSession(self._by_image[image_id])
