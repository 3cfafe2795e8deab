"""Pose error model: corrupt ground-truth poses into training queries.

Four error types are generated: jitter (small displacement), miss (large
displacement), swap (another person's same keypoint) and inversion
(left/right label confusion; coordinates untouched). Displacements are
bounded by the box half-extent and every perturbed point stays inside the
instance's bounding box.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Mapping, Sequence

import numpy as np

from .core import BoundingBox, PersonInstance, Pose, Skeleton

__all__ = [
    "ErrorTag",
    "ErrorConfig",
    "ErrorizedPose",
    "DegenerateBoxError",
    "inject_jitter",
    "inject_miss",
    "inject_swap",
    "inject_inversion",
    "build_error_queries",
]

_ERROR_TYPES = ("jitter", "miss", "swap", "inversion")


class DegenerateBoxError(ValueError):
    """Box too small to carry a bounded disturbance."""


class ErrorTag(IntEnum):
    NONE = 0
    JITTER = 1
    MISS = 2
    SWAP = 3
    INVERSION = 4


@dataclass(frozen=True)
class ErrorConfig:
    """Knobs of the error generator.

    Args:
        lambda_x / lambda_y: disturbance fractions of the box half-extent,
            in (0, 1).
        alpha: per-pair probability of exchanging left/right labels.
        preserve_ratio: fraction of keypoints kept exactly at ground truth.
        band_jitter / band_miss: (lo, hi) sub-intervals of (0, 1) scaling the
            disturbance magnitude for small vs large displacements.
        error_mix: probabilities over {jitter, miss, swap, inversion}
            summing to 1.
    """

    lambda_x: float = 0.8
    lambda_y: float = 0.8
    alpha: float = 0.4
    preserve_ratio: float = 0.3
    band_jitter: tuple[float, float] = (0.05, 0.35)
    band_miss: tuple[float, float] = (0.6, 1.0)
    error_mix: Mapping[str, float] = field(
        default_factory=lambda: {t: 0.25 for t in _ERROR_TYPES}
    )

    def __post_init__(self) -> None:
        if not (0.0 < self.lambda_x < 1.0 and 0.0 < self.lambda_y < 1.0):
            raise ValueError("lambda_x and lambda_y must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.preserve_ratio <= 1.0:
            raise ValueError("preserve_ratio must lie in [0, 1]")
        for name, (lo, hi) in (("band_jitter", self.band_jitter), ("band_miss", self.band_miss)):
            if not 0.0 < lo < hi <= 1.0:
                raise ValueError(f"{name} must satisfy 0 < lo < hi <= 1, got ({lo}, {hi})")
        mix = dict(self.error_mix)
        unknown = set(mix) - set(_ERROR_TYPES)
        if unknown:
            raise ValueError(f"unknown error types in error_mix: {sorted(unknown)}")
        if any(not 0.0 <= p <= 1.0 for p in mix.values()):
            raise ValueError("error_mix probabilities must lie in [0, 1]")
        total = sum(mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"error_mix must sum to 1 within 1e-9, got {total}")
        object.__setattr__(self, "error_mix", {t: float(mix.get(t, 0.0)) for t in _ERROR_TYPES})

    @property
    def mix_probs(self) -> np.ndarray:
        return np.array([self.error_mix[t] for t in _ERROR_TYPES], dtype=np.float64)


@dataclass(frozen=True)
class ErrorizedPose:
    """One corrupted pose: positions, labels, preserved mask and error tags."""

    positions: np.ndarray
    content_labels: np.ndarray
    preserved_mask: np.ndarray
    error_tags: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64)
        labels = np.asarray(self.content_labels, dtype=np.int64)
        mask = np.asarray(self.preserved_mask, dtype=bool)
        tags = np.asarray(self.error_tags, dtype=np.int64)
        k = pos.shape[0]
        if pos.shape != (k, 2) or labels.shape != (k,) or mask.shape != (k,) or tags.shape != (k,):
            raise ValueError("inconsistent ErrorizedPose field shapes")
        if np.any(tags[mask] != int(ErrorTag.NONE)):
            raise ValueError("preserved keypoints must carry tag none")
        for arr in (pos, labels, mask, tags):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "content_labels", labels)
        object.__setattr__(self, "preserved_mask", mask)
        object.__setattr__(self, "error_tags", tags)


def _check_box(box: BoundingBox) -> None:
    if box.w <= 1e-6 or box.h <= 1e-6:
        raise DegenerateBoxError(f"box extent too small: w={box.w} h={box.h}")


def _select_indices(pose: Pose, indices: Sequence[int] | np.ndarray | None) -> np.ndarray:
    if indices is None:
        return np.flatnonzero(pose.labeled_mask)
    return np.asarray(indices, dtype=np.int64)


def _displace(
    coords: np.ndarray,
    idx: np.ndarray,
    box: BoundingBox,
    cfg: ErrorConfig,
    band: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Displace coords[idx] by a band-scaled bounded offset, clipped to box."""
    n = len(idx)
    u = rng.uniform(band[0], band[1], size=n)
    dx = rng.uniform(-1.0, 1.0, size=n) * cfg.lambda_x * (box.w / 2.0) * u
    dy = rng.uniform(-1.0, 1.0, size=n) * cfg.lambda_y * (box.h / 2.0) * u
    out = coords.copy()
    out[idx, 0] = np.clip(coords[idx, 0] + dx, box.x1, box.x2)
    out[idx, 1] = np.clip(coords[idx, 1] + dy, box.y1, box.y2)
    return out


def inject_jitter(
    pose: Pose,
    box: BoundingBox,
    cfg: ErrorConfig,
    rng: np.random.Generator,
    indices: Sequence[int] | np.ndarray | None = None,
) -> np.ndarray:
    """Small random displacement of the selected keypoints, kept inside the box.

    |dx| < lambda_x * w/2 * u and |dy| < lambda_y * h/2 * u with u drawn from
    band_jitter. Returns a full (K, 2) coordinate array; visibility is not
    touched (the operation is coordinates-only).
    """
    _check_box(box)
    idx = _select_indices(pose, indices)
    return _displace(pose.coords, idx, box, cfg, cfg.band_jitter, rng)


def miss_floor(box: BoundingBox, cfg: ErrorConfig) -> float:
    """Minimum distance from ground truth that distinguishes a miss from jitter."""
    return cfg.band_jitter[1] * math.hypot(
        cfg.lambda_x * box.w / 2.0, cfg.lambda_y * box.h / 2.0
    )


def inject_miss(
    pose: Pose,
    box: BoundingBox,
    cfg: ErrorConfig,
    rng: np.random.Generator,
    indices: Sequence[int] | np.ndarray | None = None,
) -> np.ndarray:
    """Large displacement: like jitter but drawn from band_miss, and the
    displaced point must land farther than the jitter floor from ground
    truth (32 re-samples, then uniform placement inside the box).
    """
    _check_box(box)
    idx = _select_indices(pose, indices)
    floor = miss_floor(box, cfg)
    out = pose.coords.copy()
    for i in idx:
        gx, gy = pose.coords[i]
        placed = False
        for _ in range(32):
            u = rng.uniform(*cfg.band_miss)
            x = np.clip(gx + rng.uniform(-1.0, 1.0) * cfg.lambda_x * (box.w / 2.0) * u, box.x1, box.x2)
            y = np.clip(gy + rng.uniform(-1.0, 1.0) * cfg.lambda_y * (box.h / 2.0) * u, box.y1, box.y2)
            if math.hypot(x - gx, y - gy) >= floor:
                out[i] = (x, y)
                placed = True
                break
        if not placed:
            out[i] = (rng.uniform(box.x1, box.x2), rng.uniform(box.y1, box.y2))
    return out


def inject_swap(
    pose: Pose,
    same_image_others: Sequence[Pose],
    rng: np.random.Generator,
    box: BoundingBox,
    cfg: ErrorConfig,
    indices: Sequence[int] | np.ndarray | None = None,
) -> np.ndarray:
    """Replace selected keypoints with another person's same-type keypoint,
    clipped to the subject's box. Falls back to miss semantics when the
    image has no other person.
    """
    if not same_image_others:
        return inject_miss(pose, box, cfg, rng, indices)
    _check_box(box)
    idx = _select_indices(pose, indices)
    out = pose.coords.copy()
    for i in idx:
        donor = same_image_others[int(rng.integers(0, len(same_image_others)))]
        x, y = donor.coords[i]
        out[i, 0] = np.clip(x, box.x1, box.x2)
        out[i, 1] = np.clip(y, box.y1, box.y2)
    return out


def inject_inversion(
    labels: Sequence[int] | np.ndarray,
    skeleton: Skeleton,
    alpha: float,
    rng: np.random.Generator,
    pair_mask: Sequence[bool] | None = None,
) -> np.ndarray:
    """Independently per flip pair, exchange both members' labels with
    probability alpha. Coordinates are deliberately untouched; the
    misalignment between positions and labels is the training signal.

    pair_mask optionally restricts which flip pairs are eligible (ordered as
    skeleton.flip_pairs).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    out = np.array(labels, dtype=np.int64)
    for pair_idx, (a, b) in enumerate(skeleton.flip_pairs):
        if pair_mask is not None and not pair_mask[pair_idx]:
            continue
        if rng.random() < alpha:
            out[a], out[b] = out[b], out[a]
    return out


def build_error_queries(
    instances: Sequence[PersonInstance],
    cfg: ErrorConfig,
    rng: np.random.Generator,
    skeleton: Skeleton,
) -> list[ErrorizedPose]:
    """Corrupt each instance into an error query source.

    Per instance: ceil(preserve_ratio * K) keypoints are frozen at ground
    truth; every remaining keypoint draws an error type from error_mix and
    is perturbed by the matching inject_*. Keypoints tagged inversion keep
    their coordinates; instead, each flip pair with at least one
    inversion-tagged member (both members non-preserved) has its labels
    exchanged.
    """
    if not instances:
        raise ValueError("instances must be nonempty")
    results = []
    for subject_idx, inst in enumerate(instances):
        k = inst.pose.n_keypoints
        n_preserved = math.ceil(cfg.preserve_ratio * k)
        preserved_idx = rng.choice(k, size=n_preserved, replace=False) if n_preserved else np.array([], dtype=np.int64)
        preserved = np.zeros(k, dtype=bool)
        preserved[preserved_idx] = True

        tags = np.zeros(k, dtype=np.int64)
        free = np.flatnonzero(~preserved)
        if free.size:
            drawn = rng.choice(len(_ERROR_TYPES), size=free.size, p=cfg.mix_probs)
            tags[free] = drawn + 1  # ErrorTag values are 1-based over _ERROR_TYPES

        positions = inst.pose.coords.copy()
        others = [o.pose for j, o in enumerate(instances) if j != subject_idx]
        for tag, injector in (
            (ErrorTag.JITTER, lambda idx: inject_jitter(inst.pose, inst.box, cfg, rng, idx)),
            (ErrorTag.MISS, lambda idx: inject_miss(inst.pose, inst.box, cfg, rng, idx)),
            (ErrorTag.SWAP, lambda idx: inject_swap(inst.pose, others, rng, inst.box, cfg, idx)),
        ):
            idx = np.flatnonzero(tags == int(tag))
            if idx.size:
                positions[idx] = injector(idx)[idx]

        # Inversion: exchange labels of flip pairs touched by an
        # inversion-tagged member, both members non-preserved.
        labels = np.arange(k, dtype=np.int64)
        inverted = tags == int(ErrorTag.INVERSION)
        pair_mask = [
            (inverted[a] or inverted[b]) and not (preserved[a] or preserved[b])
            for a, b in skeleton.flip_pairs
        ]
        if any(pair_mask):
            labels = inject_inversion(labels, skeleton, 1.0, rng, pair_mask=pair_mask)

        results.append(
            ErrorizedPose(
                positions=positions,
                content_labels=labels,
                preserved_mask=preserved,
                error_tags=tags,
            )
        )
    return results
