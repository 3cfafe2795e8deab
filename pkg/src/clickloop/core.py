"""Core data model: skeletons, poses, boxes, person instances, datasets.

All coordinates are normalized to [0, 1] relative to the image. Pixel space
exists only at ingestion, rendering, and UI boundaries, which keeps every
downstream component resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from typing import Iterator, Sequence, Union

import numpy as np

__all__ = [
    "Visibility",
    "Skeleton",
    "COCO_17",
    "COCO_21",
    "Pose",
    "BoundingBox",
    "PersonInstance",
    "ImageRecord",
    "Dataset",
    "flip_labels",
    "denormalize",
    "normalize_points",
]

InstanceId = Union[int, str]


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


class Visibility(IntEnum):
    """COCO visibility convention for one keypoint."""

    NOT_LABELED = 0
    LABELED_INVISIBLE = 1
    LABELED_VISIBLE = 2


@dataclass(frozen=True)
class Skeleton:
    """Keypoint layout shared by every pose of a dataset.

    Args:
        name: identifier stored in checkpoints and exports.
        keypoint_names: K names; index order is the class-label order.
        flip_pairs: (left, right) index pairs exchanged by left/right flips.
        oks_sigmas: K positive per-keypoint falloff constants used by OKS.
        limb_edges: (a, b) index pairs rendered and synthesized as limbs.
    """

    name: str
    keypoint_names: tuple[str, ...]
    flip_pairs: tuple[tuple[int, int], ...]
    oks_sigmas: tuple[float, ...]
    limb_edges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "keypoint_names", tuple(self.keypoint_names))
        object.__setattr__(self, "flip_pairs", tuple((int(a), int(b)) for a, b in self.flip_pairs))
        object.__setattr__(self, "oks_sigmas", tuple(float(s) for s in self.oks_sigmas))
        object.__setattr__(self, "limb_edges", tuple((int(a), int(b)) for a, b in self.limb_edges))
        k = self.n_keypoints
        if k == 0:
            raise ValueError("skeleton needs at least one keypoint")
        if len(self.oks_sigmas) != k:
            raise ValueError(f"expected {k} oks_sigmas, got {len(self.oks_sigmas)}")
        if any(s <= 0.0 for s in self.oks_sigmas):
            raise ValueError("all oks_sigmas must be > 0")
        seen: set[int] = set()
        for a, b in self.flip_pairs:
            for i in (a, b):
                if not 0 <= i < k:
                    raise ValueError(f"flip-pair index {i} outside [0, {k})")
                if i in seen:
                    raise ValueError(f"keypoint {i} appears in more than one flip pair")
                seen.add(i)
        for a, b in self.limb_edges:
            for i in (a, b):
                if not 0 <= i < k:
                    raise ValueError(f"limb-edge index {i} outside [0, {k})")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_names)

    @cached_property
    def flip_index_map(self) -> np.ndarray:
        """Index map sending each keypoint to its flip partner (fixed point if unpaired)."""
        mapping = np.arange(self.n_keypoints, dtype=np.int64)
        for a, b in self.flip_pairs:
            mapping[a], mapping[b] = b, a
        mapping.setflags(write=False)
        return mapping

    @cached_property
    def sigma_array(self) -> np.ndarray:
        return _frozen_array(self.oks_sigmas, np.float64)


# ---------------------------------------------------------------------------
# Bundled skeletons
# ---------------------------------------------------------------------------

_COCO_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

_COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)

_COCO_FLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

_COCO_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12),
    (5, 11), (6, 12), (5, 6), (5, 7), (6, 8), (7, 9), (8, 10),
    (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)

COCO_17 = Skeleton(
    name="coco17",
    keypoint_names=_COCO_NAMES,
    flip_pairs=_COCO_FLIP_PAIRS,
    oks_sigmas=_COCO_SIGMAS,
    limb_edges=_COCO_EDGES,
)

# COCO-17 plus hand/foot midpoints; the 4 extra sigmas reuse the shoulder
# falloff because no measured constants exist for them.
COCO_21 = Skeleton(
    name="coco21",
    keypoint_names=_COCO_NAMES + ("left_hand", "right_hand", "left_foot", "right_foot"),
    flip_pairs=_COCO_FLIP_PAIRS + ((17, 18), (19, 20)),
    oks_sigmas=_COCO_SIGMAS + (0.079, 0.079, 0.079, 0.079),
    limb_edges=_COCO_EDGES + ((9, 17), (10, 18), (15, 19), (16, 20)),
)

BUNDLED_SKELETONS = {s.name: s for s in (COCO_17, COCO_21)}


def flip_labels(labels: Sequence[int] | np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Exchange left/right keypoint-class indices; unpaired indices pass through.

    An involution: applying it twice returns the original labels.
    """
    arr = np.asarray(labels, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= skeleton.n_keypoints):
        raise ValueError(f"labels outside [0, {skeleton.n_keypoints})")
    return skeleton.flip_index_map[arr]


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

_EPS = 1e-9


@dataclass(frozen=True)
class Pose:
    """K keypoint coordinates in [0,1]^2 with per-keypoint visibility flags."""

    coords: np.ndarray
    visibility: np.ndarray

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=np.float64)
        vis = np.array(self.visibility, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (K, 2), got {coords.shape}")
        if vis.shape != (coords.shape[0],):
            raise ValueError(f"visibility must have shape ({coords.shape[0]},), got {vis.shape}")
        if not np.all(np.isin(vis, (0, 1, 2))):
            raise ValueError("visibility flags must be 0, 1 or 2")
        labeled = vis != Visibility.NOT_LABELED
        if labeled.any():
            pts = coords[labeled]
            if not np.isfinite(pts).all():
                raise ValueError("labeled keypoints must be finite")
            if pts.min() < -_EPS or pts.max() > 1.0 + _EPS:
                raise ValueError("labeled keypoints must lie in [0, 1]^2")
        coords.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visibility", vis)

    @property
    def n_keypoints(self) -> int:
        return self.coords.shape[0]

    @cached_property
    def labeled_mask(self) -> np.ndarray:
        mask = self.visibility != Visibility.NOT_LABELED
        mask.setflags(write=False)
        return mask

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_mask.sum())

    def replace_coords(self, coords: np.ndarray) -> "Pose":
        return Pose(coords=coords, visibility=self.visibility)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box as normalized (center_x, center_y, width, height)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not all(np.isfinite((self.cx, self.cy, self.w, self.h))):
            raise ValueError("box fields must be finite")
        if self.w <= 0.0 or self.h <= 0.0:
            raise ValueError(f"box must have positive extent, got w={self.w} h={self.h}")
        if self.x1 < -_EPS or self.y1 < -_EPS or self.x2 > 1.0 + _EPS or self.y2 > 1.0 + _EPS:
            raise ValueError("box must lie within [0, 1]^2; use BoundingBox.clipped")

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains(self, x: float, y: float, eps: float = 1e-12) -> bool:
        return (self.x1 - eps <= x <= self.x2 + eps) and (self.y1 - eps <= y <= self.y2 + eps)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(cx=(x1 + x2) / 2.0, cy=(y1 + y2) / 2.0, w=x2 - x1, h=y2 - y1)

    @classmethod
    def clipped(cls, cx: float, cy: float, w: float, h: float, min_size: float = 1e-6) -> "BoundingBox":
        """Build a box clipped into [0,1]^2, enforcing a minimal extent."""
        x1 = min(max(cx - w / 2.0, 0.0), 1.0)
        y1 = min(max(cy - h / 2.0, 0.0), 1.0)
        x2 = min(max(cx + w / 2.0, 0.0), 1.0)
        y2 = min(max(cy + h / 2.0, 0.0), 1.0)
        if x2 - x1 < min_size:
            mid = (x1 + x2) / 2.0
            x1 = min(max(mid - min_size / 2.0, 0.0), 1.0 - min_size)
            x2 = x1 + min_size
        if y2 - y1 < min_size:
            mid = (y1 + y2) / 2.0
            y1 = min(max(mid - min_size / 2.0, 0.0), 1.0 - min_size)
            y2 = y1 + min_size
        return cls.from_corners(x1, y1, x2, y2)


@dataclass(frozen=True)
class PersonInstance:
    """One ground-truth or predicted person: box, pose, identity, score."""

    box: BoundingBox
    pose: Pose
    instance_id: InstanceId
    score: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "score", float(self.score))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ImageRecord:
    """One image with its person annotations; pixels are H x W x 3 uint8."""

    image_id: InstanceId
    pixels: np.ndarray
    persons: tuple[PersonInstance, ...]

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise ValueError(f"pixels must be H x W x 3 uint8, got {pixels.shape} {pixels.dtype}")
        if not pixels.flags.owndata:
            pixels = pixels.copy()
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "persons", tuple(self.persons))

    @property
    def dims(self) -> tuple[int, int]:
        """(W, H) in pixels."""
        return self.pixels.shape[1], self.pixels.shape[0]


@dataclass(frozen=True)
class Dataset:
    """Immutable collection of annotated images sharing one skeleton."""

    images: tuple[ImageRecord, ...]
    skeleton: Skeleton

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        k = self.skeleton.n_keypoints
        for rec in self.images:
            for person in rec.persons:
                if person.pose.n_keypoints != k:
                    raise ValueError(
                        f"image {rec.image_id!r}: instance {person.instance_id!r} has "
                        f"{person.pose.n_keypoints} keypoints, skeleton has {k}"
                    )

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.images)

    def __getitem__(self, idx: int) -> ImageRecord:
        return self.images[idx]

    @property
    def n_instances(self) -> int:
        return sum(len(rec.persons) for rec in self.images)


# ---------------------------------------------------------------------------
# Coordinate conversion
# ---------------------------------------------------------------------------

def denormalize(pose: Pose, image_dims: tuple[int, int]) -> np.ndarray:
    """Map normalized pose coordinates to pixel space for (W, H) image dims."""
    w, h = image_dims
    if w <= 0 or h <= 0:
        raise ValueError(f"image dims must be positive, got {image_dims}")
    return pose.coords * np.array([w, h], dtype=np.float64)


def normalize_points(points_px: np.ndarray, image_dims: tuple[int, int]) -> np.ndarray:
    """Map pixel-space (x, y) points to normalized [0,1] coordinates."""
    w, h = image_dims
    if w <= 0 or h <= 0:
        raise ValueError(f"image dims must be positive, got {image_dims}")
    return np.asarray(points_px, dtype=np.float64) / np.array([w, h], dtype=np.float64)
