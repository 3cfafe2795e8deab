"""Interactive annotation session: clicks, decoder loops, pinning, undo.

A session caches the encoded image features once, then refines keypoints by
re-running only the human-to-keypoint decoder. User-clicked keypoints are
pinned: every subsequent loop writes them back to the user-given position,
so feedback is never overridden. Undo restores the exact pre-click snapshot.

Every mutation is journaled in an event log; replaying the log through the
same checkpoint reproduces the session state bit for bit, which is what the
service layer uses for persistence and crash recovery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .core import BoundingBox, Visibility
from .model import (
    FeatureMap,
    HumanQuerySet,
    KeypointDetector,
    KeypointQuerySet,
    Predictions,
    QueryOrigin,
    embed_labels,
    prepare_images,
)

__all__ = [
    "ClickEvent",
    "SessionStateError",
    "EmptyPoseError",
    "AnnotationSession",
    "regularize_box",
]


class SessionStateError(RuntimeError):
    """Operation requires session state that is not present."""


class EmptyPoseError(ValueError):
    """A pose with zero labeled keypoints cannot define a box."""


@dataclass(frozen=True)
class ClickEvent:
    """One user correction: set (instance, keypoint) to a normalized position."""

    instance_index: int
    keypoint_index: int
    position: tuple[float, float]
    timestamp: int

    def __post_init__(self) -> None:
        x, y = self.position
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise ValueError(f"click position {self.position} outside [0, 1]^2")


@dataclass
class _Snapshot:
    kpt_positions: torch.Tensor
    kpt_contents: torch.Tensor
    kpt_score_logits: torch.Tensor
    human_boxes: torch.Tensor
    human_contents: torch.Tensor
    score_logits: torch.Tensor
    pinned: dict[tuple[int, int], tuple[float, float]]
    loop_count: int
    origin: QueryOrigin


class AnnotationSession:
    """Mutable per-image annotation state bound to one model checkpoint."""

    def __init__(self, model: KeypointDetector, pixels: np.ndarray):
        self.model = model
        self.pixels = np.asarray(pixels)
        self.features: Optional[FeatureMap] = None
        self.kpt_positions: torch.Tensor
        self.kpt_contents: torch.Tensor
        self.kpt_score_logits: torch.Tensor
        self.human_boxes: torch.Tensor
        self.human_contents: torch.Tensor
        self.score_logits: torch.Tensor
        self.origin = QueryOrigin.PREDICTED
        self.pinned: dict[tuple[int, int], tuple[float, float]] = {}
        self.clicks: list[ClickEvent] = []
        self.loop_count = 0
        self.event_log: list[dict] = []
        self._snapshots: list[_Snapshot] = []
        self._run_initial_forward()

    # -- construction --------------------------------------------------------

    @classmethod
    def start(cls, model: KeypointDetector, pixels: np.ndarray) -> "AnnotationSession":
        """Run the initial full forward pass and return a live session."""
        return cls(model, pixels)

    @classmethod
    def replay(
        cls, model: KeypointDetector, pixels: np.ndarray, events: Sequence[dict]
    ) -> "AnnotationSession":
        """Rebuild a session by replaying its event log deterministically."""
        session = cls(model, pixels)
        for event in events:
            kind = event["type"]
            if kind == "click":
                session.click(
                    event["instance_index"],
                    event["keypoint_index"],
                    event["x"],
                    event["y"],
                )
            elif kind == "loop":
                session.loop_refine()
            elif kind == "undo":
                session.undo_click()
            else:
                raise ValueError(f"unknown session event type {kind!r}")
        return session

    def _run_initial_forward(self) -> None:
        self.model.eval()
        with torch.no_grad():
            preds, humans, fm = self.model.forward_full(prepare_images(self.pixels))
        self.features = fm
        self._adopt(preds)

    def _adopt(self, preds: Predictions) -> None:
        self.kpt_positions = preds.keypoints.detach().clone()
        self.kpt_contents = preds.kpt_contents.detach().clone()
        self.kpt_score_logits = preds.kpt_score_logits.detach().clone()
        self.human_boxes = preds.boxes.detach().clone()
        self.human_contents = preds.human_contents.detach().clone()
        self.score_logits = preds.score_logits.detach().clone()

    # -- inspection ------------------------------------------------------------

    @property
    def n_instances(self) -> int:
        return self.kpt_positions.shape[1]

    @property
    def n_keypoints(self) -> int:
        return self.kpt_positions.shape[2]

    def poses_numpy(self) -> np.ndarray:
        """(N, K, 2) current keypoint coordinates as float64."""
        return self.kpt_positions[0].numpy().astype(np.float64)

    def boxes_numpy(self) -> np.ndarray:
        return self.human_boxes[0].numpy().astype(np.float64)

    def scores_numpy(self) -> np.ndarray:
        return torch.sigmoid(self.score_logits)[0].numpy().astype(np.float64)

    def kpt_scores_numpy(self) -> np.ndarray:
        return torch.sigmoid(self.kpt_score_logits)[0].numpy().astype(np.float64)

    # -- mutations ---------------------------------------------------------

    def click(self, instance_index: int, keypoint_index: int, x: float, y: float) -> ClickEvent:
        """Build a ClickEvent with the next timestamp and apply it."""
        event = ClickEvent(
            instance_index=instance_index,
            keypoint_index=keypoint_index,
            position=(float(x), float(y)),
            timestamp=len(self.clicks),
        )
        self.apply_click(event)
        return event

    def apply_click(self, click: ClickEvent) -> "AnnotationSession":
        """Set one keypoint to the user position and pin it.

        All content vectors of the clicked instance are re-initialized from
        the codebook label embeddings, aligning stale predicted contents with
        the modified positions. No decoder pass happens here. Re-applying an
        identical click is a no-op.
        """
        i, k = click.instance_index, click.keypoint_index
        if not 0 <= i < self.n_instances:
            raise IndexError(f"instance index {i} outside [0, {self.n_instances})")
        if not 0 <= k < self.n_keypoints:
            raise IndexError(f"keypoint index {k} outside [0, {self.n_keypoints})")
        x, y = click.position

        if self.pinned.get((i, k)) == (x, y):
            return self

        self._snapshots.append(self._take_snapshot())
        self.kpt_positions[0, i, k, 0] = x
        self.kpt_positions[0, i, k, 1] = y
        with torch.no_grad():
            labels = torch.arange(self.n_keypoints)
            self.kpt_contents[0, i] = embed_labels(labels, self.model.codebook).to(
                self.kpt_contents.dtype
            )
        self.pinned[(i, k)] = (x, y)
        self.origin = QueryOrigin.MODIFIED
        self.clicks.append(click)
        self.event_log.append(
            {"type": "click", "instance_index": i, "keypoint_index": k, "x": x, "y": y}
        )
        return self

    def loop_refine(self) -> "AnnotationSession":
        """Re-run the human-to-keypoint decoder on the cached features.

        The encoder and human decoder are not touched. Afterwards every
        pinned keypoint is written back to its user-given position.
        """
        if self.features is None:
            raise SessionStateError("no cached features; session was not started")
        humans = HumanQuerySet(
            boxes=self.human_boxes,
            contents=self.human_contents,
            score_logits=self.score_logits,
        )
        kps = KeypointQuerySet(
            positions=self.kpt_positions,
            contents=self.kpt_contents,
            origin=self.origin,
        )
        self.model.eval()
        with torch.no_grad():
            preds = self.model.decode_keypoints(self.features, humans, kps)
        self._adopt(preds)
        for (i, k), (x, y) in self.pinned.items():
            self.kpt_positions[0, i, k, 0] = x
            self.kpt_positions[0, i, k, 1] = y
        self.loop_count += 1
        self.event_log.append({"type": "loop"})
        return self

    def undo_click(self) -> "AnnotationSession":
        """Restore the exact state captured just before the last click.

        Loops performed after that click are discarded with it.
        """
        if not self._snapshots:
            raise SessionStateError("no clicks to undo")
        snap = self._snapshots.pop()
        self.kpt_positions = snap.kpt_positions
        self.kpt_contents = snap.kpt_contents
        self.kpt_score_logits = snap.kpt_score_logits
        self.human_boxes = snap.human_boxes
        self.human_contents = snap.human_contents
        self.score_logits = snap.score_logits
        self.pinned = snap.pinned
        self.loop_count = snap.loop_count
        self.origin = snap.origin
        self.clicks.pop()
        self.event_log.append({"type": "undo"})
        return self

    def _take_snapshot(self) -> _Snapshot:
        return _Snapshot(
            kpt_positions=self.kpt_positions.clone(),
            kpt_contents=self.kpt_contents.clone(),
            kpt_score_logits=self.kpt_score_logits.clone(),
            human_boxes=self.human_boxes.clone(),
            human_contents=self.human_contents.clone(),
            score_logits=self.score_logits.clone(),
            pinned=dict(self.pinned),
            loop_count=self.loop_count,
            origin=self.origin,
        )


def regularize_box(
    coords: np.ndarray, visibility: np.ndarray, pad: float = 0.05
) -> BoundingBox:
    """Tight box over labeled keypoints, expanded by pad on each side.

    pad is an absolute expansion in normalized units (a single keypoint with
    pad 0.05 yields a 0.1 x 0.1 box). The result is clipped to [0, 1]^2 and
    always contains every labeled keypoint.
    """
    coords = np.asarray(coords, dtype=np.float64)
    labeled = np.asarray(visibility, dtype=np.int64) != int(Visibility.NOT_LABELED)
    if not labeled.any():
        raise EmptyPoseError("cannot regularize a box around zero labeled keypoints")
    pts = coords[labeled]
    x1 = max(0.0, float(pts[:, 0].min()) - pad)
    y1 = max(0.0, float(pts[:, 1].min()) - pad)
    x2 = min(1.0, float(pts[:, 0].max()) + pad)
    y2 = min(1.0, float(pts[:, 1].max()) + pad)
    return BoundingBox.clipped((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
