"""Self-describing checkpoint container.

Layout: a torch-serialized dict with a version header, the model config,
the skeleton identity and every parameter as a named tensor. Only plain
types and tensors are stored, so files load under torch's weights-only mode.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

import torch

from .core import BUNDLED_SKELETONS, Skeleton
from .model import KeypointDetector, ModelConfig

__all__ = [
    "FORMAT_HEADER",
    "CheckpointFormatError",
    "SkeletonMismatchError",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_HEADER = "CLICKLOOP-CKPT-1"


class CheckpointFormatError(ValueError):
    """File is not a recognized checkpoint."""


class SkeletonMismatchError(ValueError):
    """Checkpoint and requested skeleton disagree on the keypoint count."""

    def __init__(self, checkpoint_k: int, requested_k: int):
        super().__init__(
            f"checkpoint was trained for K={checkpoint_k} keypoints, "
            f"dataset/skeleton has K={requested_k}"
        )
        self.checkpoint_k = checkpoint_k
        self.requested_k = requested_k


def _skeleton_payload(skeleton: Skeleton) -> dict:
    return {
        "name": skeleton.name,
        "keypoint_names": list(skeleton.keypoint_names),
        "flip_pairs": [list(p) for p in skeleton.flip_pairs],
        "oks_sigmas": list(skeleton.oks_sigmas),
        "limb_edges": [list(e) for e in skeleton.limb_edges],
    }


def _skeleton_from_payload(payload: dict) -> Skeleton:
    name = payload["name"]
    if name in BUNDLED_SKELETONS:
        bundled = BUNDLED_SKELETONS[name]
        if list(bundled.keypoint_names) == payload["keypoint_names"]:
            return bundled
    return Skeleton(
        name=name,
        keypoint_names=tuple(payload["keypoint_names"]),
        flip_pairs=tuple(tuple(p) for p in payload["flip_pairs"]),
        oks_sigmas=tuple(payload["oks_sigmas"]),
        limb_edges=tuple(tuple(e) for e in payload["limb_edges"]),
    )


def save_checkpoint(
    path: str | Path,
    model: KeypointDetector,
    skeleton: Skeleton,
    meta: Optional[dict] = None,
) -> Path:
    """Write model weights, config and skeleton identity to path."""
    if model.cfg.n_keypoints != skeleton.n_keypoints:
        raise SkeletonMismatchError(model.cfg.n_keypoints, skeleton.n_keypoints)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_HEADER,
        "model_config": asdict(model.cfg),
        "skeleton": _skeleton_payload(skeleton),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[KeypointDetector, Skeleton, dict]:
    """Load a checkpoint; returns (model in eval mode, skeleton, meta).

    Raises CheckpointFormatError for unrecognized files.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointFormatError(f"{path}: not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_HEADER:
        raise CheckpointFormatError(
            f"{path}: missing or unknown format header (expected {FORMAT_HEADER!r})"
        )
    cfg = ModelConfig(**payload["model_config"])
    skeleton = _skeleton_from_payload(payload["skeleton"])
    if cfg.n_keypoints != skeleton.n_keypoints:
        raise SkeletonMismatchError(cfg.n_keypoints, skeleton.n_keypoints)
    model = KeypointDetector(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, skeleton, payload["meta"]
