"""Training: composite objective over detection, error reconstruction and
the click-conditioned feedback loop.

Each step shares one encoder pass across three phases:
  1. detection: full forward, Hungarian-matched set losses on every decoder
     layer (keypoint decoder and human decoder alike);
  2. error reconstruction: decode synthetic degraded poses built around GT
     boxes back toward the GT, trained per layer without matching;
  3. feedback loop: pin the worst keypoint of each matched instance to its
     GT position, re-embed that instance's content vectors from the label
     codebook and decode again, reusing the first-pass assignment.

The step total is exactly the sum of the three terms; that additivity is
asserted on every step. Ablations switch phases 2 and 3 off independently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .core import Dataset, PersonInstance, Pose, Skeleton
from .errors import ErrorConfig, build_error_queries
from .losses import LossBundle, LossTerms, loss_detection, loss_loop, loss_reconstruction
from .matching import Assignment, CostWeights, build_cost_matrix, hungarian_match
from .model import (
    HumanQuerySet,
    KeypointDetector,
    KeypointQuerySet,
    ModelConfig,
    QueryOrigin,
    embed_labels,
    prepare_images,
)

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "StepRecord",
    "TrainResult",
    "check_finite_loss",
    "worst_keypoint",
    "simulate_training_clicks",
    "train",
]


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; the run is unrecoverable."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    use_error_model: bool = True
    use_loop: bool = True
    error_sets: int = 1
    clicks_per_instance: int = 1
    w_kconf: float = 1.0
    sigma_weighted_kpt_l1: bool = True
    warmup_steps: int = 0
    lr_schedule: str = "constant"
    lr_final_ratio: float = 0.1
    log_csv: Optional[str] = None
    errors: ErrorConfig = field(default_factory=ErrorConfig)
    weights: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be > 0, weight_decay >= 0")
        if self.clicks_per_instance < 1 or self.error_sets < 1:
            raise ValueError("clicks_per_instance and error_sets must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.warmup_steps < 0 or not 0.0 < self.lr_final_ratio <= 1.0:
            raise ValueError("warmup_steps must be >= 0, lr_final_ratio in (0, 1]")


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    bundle: LossBundle
    lr: float
    parts: dict[str, float]


@dataclass
class TrainResult:
    model: KeypointDetector
    history: list[StepRecord]

    def final_total(self) -> float:
        return self.history[-1].bundle.total


def check_finite_loss(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value} at step {step}")


def worst_keypoint(
    pred_coords: np.ndarray, gt: Pose, exclude: frozenset[int] = frozenset()
) -> Optional[int]:
    """Labeled keypoint with the largest L2 error; ties take the smallest
    index. None when every labeled keypoint is excluded."""
    candidates = [k for k in np.flatnonzero(gt.labeled_mask) if int(k) not in exclude]
    if not candidates:
        return None
    cand = np.asarray(candidates, dtype=np.int64)
    d = np.linalg.norm(np.asarray(pred_coords, np.float64)[cand] - gt.coords[cand], axis=1)
    return int(cand[int(np.argmax(d))])


def simulate_training_clicks(
    pred_kpts: np.ndarray,
    assignment: Assignment,
    gts: Sequence[PersonInstance],
    n_clicks: int,
) -> list[tuple[int, int, float, float]]:
    """Clicks for one image: per matched instance, the n_clicks worst
    keypoints, each set to its GT position. Returns (query, kpt, x, y)."""
    out: list[tuple[int, int, float, float]] = []
    for p, g in assignment.pairs:
        gt = gts[g]
        chosen: set[int] = set()
        for _ in range(n_clicks):
            k = worst_keypoint(pred_kpts[p], gt.pose, frozenset(chosen))
            if k is None:
                break
            chosen.add(k)
            x, y = gt.pose.coords[k]
            out.append((p, k, float(x), float(y)))
    return out


def _match_batch(
    preds, batch: Sequence, weights: CostWeights
) -> list[Assignment]:
    scores = preds.scores.detach().numpy().astype(np.float64)
    boxes = preds.boxes.detach().numpy().astype(np.float64)
    kpts = preds.keypoints.detach().numpy().astype(np.float64)
    out = []
    for b, image in enumerate(batch):
        cost = build_cost_matrix(scores[b], boxes[b], kpts[b], image.persons, weights)
        out.append(hungarian_match(cost))
    return out


def _error_phase(
    model: KeypointDetector,
    fm,
    batch: Sequence,
    cfg: TrainConfig,
    skeleton: Skeleton,
    rng: np.random.Generator,
    kpt_weights: Optional[Tensor] = None,
) -> LossTerms:
    """Decode degraded GT poses back toward the GT (no matching).

    Each person is corrupted error_sets times per step; independent draws
    sharing one encoder pass densify the localization signal cheaply."""
    k = model.cfg.n_keypoints
    c = model.cfg.channel_dim
    dtype = fm.tokens.dtype
    sets = cfg.error_sets
    g_max = max(len(image.persons) for image in batch) * sets

    positions = torch.full((len(batch), g_max, k, 2), 0.5, dtype=dtype)
    contents = torch.zeros((len(batch), g_max, k, c), dtype=dtype)
    boxes = torch.tensor([0.5, 0.5, 0.2, 0.2], dtype=dtype).repeat(len(batch), g_max, 1)
    base_labels = torch.arange(k)
    with torch.no_grad():
        pad_content = embed_labels(base_labels, model.codebook).to(dtype)
    contents[:, :] = pad_content

    gt_lists = []
    for b, image in enumerate(batch):
        gt_lists.append(image.persons * sets)
        if not image.persons:
            continue
        errorized = []
        for _ in range(sets):
            errorized.extend(build_error_queries(image.persons, cfg.errors, rng, skeleton))
        for g, (inst, err) in enumerate(zip(gt_lists[b], errorized)):
            positions[b, g] = torch.from_numpy(err.positions.copy()).to(dtype)
            contents[b, g] = embed_labels(err.content_labels, model.codebook).to(dtype)
            boxes[b, g] = torch.from_numpy(inst.box.as_array()).to(dtype)

    humans = HumanQuerySet(
        boxes=boxes,
        contents=model.gt_human_content.weight.view(1, 1, c).expand(len(batch), g_max, c),
        score_logits=torch.zeros(len(batch), g_max, dtype=dtype),
    )
    kpq = KeypointQuerySet(positions=positions, contents=contents, origin=QueryOrigin.ERROR)
    preds = model.decode_keypoints(fm, humans, kpq)
    return loss_reconstruction(preds, gt_lists, kpt_weights=kpt_weights)


def _loop_phase(
    model: KeypointDetector,
    fm,
    first_pass,
    batch: Sequence,
    assignments: Sequence[Assignment],
    cfg: TrainConfig,
    sigmas: Tensor,
    kpt_weights: Optional[Tensor] = None,
) -> LossTerms:
    """Simulated-click pass: pin worst keypoints to GT, re-embed clicked
    instances' contents from the codebook, decode again on cached features."""
    k = model.cfg.n_keypoints
    positions = first_pass.keypoints.detach().clone()
    contents = first_pass.kpt_contents.detach().clone()
    pred_np = positions.numpy().astype(np.float64)

    fresh = embed_labels(torch.arange(k), model.codebook).to(contents.dtype)
    for b, image in enumerate(batch):
        clicks = simulate_training_clicks(
            pred_np[b], assignments[b], image.persons, cfg.clicks_per_instance
        )
        clicked_groups = {p for p, _, _, _ in clicks}
        for p in clicked_groups:
            contents[b, p] = fresh
        for p, kk, x, y in clicks:
            positions[b, p, kk, 0] = x
            positions[b, p, kk, 1] = y

    humans = HumanQuerySet(
        boxes=first_pass.boxes.detach().clone(),
        contents=first_pass.human_contents.detach().clone(),
        score_logits=first_pass.score_logits.detach().clone(),
    )
    kpq = KeypointQuerySet(positions=positions, contents=contents, origin=QueryOrigin.MODIFIED)
    preds = model.decode_keypoints(fm, humans, kpq)
    return loss_loop(
        preds,
        [image.persons for image in batch],
        assignments,
        cfg.weights,
        sigmas=sigmas,
        w_kconf=cfg.w_kconf,
        kpt_weights=kpt_weights,
    )


def train(
    dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    model: Optional[KeypointDetector] = None,
    model_cfg: Optional[ModelConfig] = None,
) -> TrainResult:
    """Train a detector on a dataset. Deterministic for a fixed seed."""
    torch.manual_seed(cfg.seed)
    if model is None:
        model = KeypointDetector(model_cfg or ModelConfig(n_keypoints=dataset.skeleton.n_keypoints))
    if model.cfg.n_keypoints != dataset.skeleton.n_keypoints:
        raise ValueError(
            f"model has {model.cfg.n_keypoints} keypoints, "
            f"dataset skeleton has {dataset.skeleton.n_keypoints}"
        )
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    error_rng = np.random.default_rng([cfg.seed, 2])
    sigmas = torch.from_numpy(dataset.skeleton.sigma_array.copy())
    kpt_weights = None
    if cfg.sigma_weighted_kpt_l1:
        # keypoint tolerance under the similarity metric scales with sigma,
        # so the L1 pressure scales with 1/sigma (normalized to mean 1)
        inv = 1.0 / sigmas
        kpt_weights = inv * (len(inv) / inv.sum())
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    steps_per_epoch = math.ceil(len(dataset.images) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    def step_lr(t: int) -> float:
        lr = cfg.lr
        if cfg.warmup_steps > 0:
            lr *= min(1.0, (t + 1) / cfg.warmup_steps)
        if cfg.lr_schedule == "cosine" and total_steps > cfg.warmup_steps:
            frac = max(0, t - cfg.warmup_steps) / (total_steps - cfg.warmup_steps)
            floor = cfg.lr_final_ratio
            lr *= floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
        return lr

    writer = None
    log_file = None
    if cfg.log_csv is not None:
        log_file = open(cfg.log_csv, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["epoch", "step", "l_g", "l_r", "l_l", "total", "lr"])

    history: list[StepRecord] = []
    step = 0
    try:
        model.train()
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(dataset.images))
            for start in range(0, len(order), cfg.batch_size):
                batch = [dataset.images[i] for i in order[start : start + cfg.batch_size]]
                gt_batch = [image.persons for image in batch]
                images = prepare_images([image.pixels for image in batch])

                first_pass, humans, fm = model.forward_full(images)
                assignments = _match_batch(first_pass, batch, cfg.weights)
                l_g = loss_detection(
                    first_pass,
                    gt_batch,
                    assignments,
                    cfg.weights,
                    sigmas=sigmas,
                    human_aux=humans,
                    w_kconf=cfg.w_kconf,
                    kpt_weights=kpt_weights,
                )

                any_persons = any(image.persons for image in batch)
                zero = torch.zeros((), dtype=l_g.value.dtype)
                if cfg.use_error_model and any_persons:
                    l_r = _error_phase(
                        model, fm, batch, cfg, dataset.skeleton, error_rng,
                        kpt_weights=kpt_weights,
                    )
                else:
                    l_r = LossTerms(value=zero, parts={})
                if cfg.use_loop and any_persons:
                    l_l = _loop_phase(
                        model, fm, first_pass, batch, assignments, cfg, sigmas,
                        kpt_weights=kpt_weights,
                    )
                else:
                    l_l = LossTerms(value=zero, parts={})

                total = l_g.value + l_r.value + l_l.value
                bundle = LossBundle(
                    l_g=l_g.item(), l_r=l_r.item(), l_l=l_l.item(), total=float(total.detach())
                )
                check_finite_loss(bundle.total, step)

                lr = step_lr(step)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()

                history.append(
                    StepRecord(epoch=epoch, step=step, bundle=bundle, lr=lr, parts=l_g.parts)
                )
                if writer is not None:
                    writer.writerow(
                        [epoch, step, bundle.l_g, bundle.l_r, bundle.l_l, bundle.total, lr]
                    )
                step += 1
            if log_file is not None:
                log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return TrainResult(model=model, history=history)
