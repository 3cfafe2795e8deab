"""Pose metrics and simulated-annotator studies.

Covers object-keypoint-similarity (OKS) scoring, COCO-style average
precision, greedy GT-to-prediction binding, simulated click selection,
click-efficacy sweeps, number-of-clicks (NoC) measurement, query noise
sensitivity probes, and a loop-vs-full-pass timing benchmark.

Anything that talks to a model does so through the session engine protocol,
so tests can substitute stub engines with scripted behavior.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
import torch

from .core import Dataset, PersonInstance, Pose, Skeleton
from .model import KeypointDetector, prepare_images
from .session import AnnotationSession

__all__ = [
    "UndefinedOksError",
    "ExhaustedError",
    "EvalConfig",
    "ApReport",
    "compute_oks",
    "oks_matrix",
    "compute_ap",
    "evaluate_model",
    "bind_predictions",
    "select_click",
    "ModelEngine",
    "SimulationReport",
    "simulate_annotation",
    "NocReport",
    "noc_at",
    "sensitivity_probe",
    "timing_benchmark",
]

DEFAULT_OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

_BIND_MIN_OKS = 0.3


class UndefinedOksError(ValueError):
    """OKS is undefined: no labeled keypoints or a degenerate box."""


class ExhaustedError(RuntimeError):
    """No keypoint is left to click under the given exclusions."""


@dataclass(frozen=True)
class EvalConfig:
    oks_thresholds: tuple[float, ...] = DEFAULT_OKS_THRESHOLDS
    noc_cap: int = 20
    click_strategy: str = "worse"
    click_mode: str = "progressive"
    clicks_per_instance: int = 3
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.click_strategy not in ("random", "low_score", "worse"):
            raise ValueError(f"unknown click strategy {self.click_strategy!r}")
        if self.click_mode not in ("only_once", "progressive"):
            raise ValueError(f"unknown click mode {self.click_mode!r}")
        if self.noc_cap < 1:
            raise ValueError("noc_cap must be >= 1")
        if not self.oks_thresholds:
            raise ValueError("need at least one OKS threshold")


# -- OKS and average precision -------------------------------------------------


def compute_oks(
    pred_coords: np.ndarray, gt: PersonInstance, sigmas: np.ndarray
) -> float:
    """Mean per-keypoint similarity exp(-d^2 / (2 s^2 sigma_i^2)) over labeled
    keypoints, with s^2 the GT box area. Coordinates are normalized, so the
    box area is normalized too."""
    labeled = gt.pose.labeled_mask
    if not labeled.any():
        raise UndefinedOksError("no labeled keypoints")
    s2 = gt.box.area
    if s2 <= 0.0:
        raise UndefinedOksError("GT box has non-positive area")
    d2 = np.sum((np.asarray(pred_coords, dtype=np.float64) - gt.pose.coords) ** 2, axis=1)
    sig = np.asarray(sigmas, dtype=np.float64)
    terms = np.exp(-d2[labeled] / (2.0 * s2 * sig[labeled] ** 2))
    return float(terms.mean())


def oks_matrix(
    pred_coords: np.ndarray, gts: Sequence[PersonInstance], sigmas: np.ndarray
) -> np.ndarray:
    """(n_pred, n_gt) OKS values for one image."""
    out = np.zeros((len(pred_coords), len(gts)), dtype=np.float64)
    for g, gt in enumerate(gts):
        for p in range(len(pred_coords)):
            out[p, g] = compute_oks(pred_coords[p], gt, sigmas)
    return out


@dataclass(frozen=True)
class ApReport:
    per_threshold: dict[float, float]
    mean: float
    n_gt: int

    def at(self, threshold: float) -> float:
        return self.per_threshold[round(threshold, 2)]


def _interpolated_ap(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # 101-point interpolation: max precision at recall >= r.
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / 101.0


def compute_ap(
    predictions: dict[object, tuple[np.ndarray, np.ndarray]],
    ground_truth: dict[object, Sequence[PersonInstance]],
    sigmas: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_OKS_THRESHOLDS,
) -> ApReport:
    """COCO-style AP via greedy per-image matching.

    predictions maps image_id to (scores (M,), coords (M, K, 2)); every image
    in ground_truth must have an entry (possibly empty). Within an image,
    predictions claim their best-OKS unmatched GT in descending score order;
    a claim below the threshold is a false positive.
    """
    n_gt = sum(len(g) for g in ground_truth.values())
    cache: dict[object, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for image_id, gts in ground_truth.items():
        scores, coords = predictions[image_id]
        scores = np.asarray(scores, dtype=np.float64)
        mat = (
            oks_matrix(np.asarray(coords, dtype=np.float64), gts, sigmas)
            if len(gts) and len(scores)
            else np.zeros((len(scores), len(gts)))
        )
        cache[image_id] = (scores, mat, np.argsort(-scores, kind="stable"))

    per_threshold: dict[float, float] = {}
    for thr in thresholds:
        all_scores: list[float] = []
        all_tp: list[bool] = []
        for image_id, gts in ground_truth.items():
            scores, mat, order = cache[image_id]
            taken = np.zeros(len(gts), dtype=bool)
            for p in order:
                best_g, best_oks = -1, thr
                for g in range(len(gts)):
                    if not taken[g] and mat[p, g] >= best_oks:
                        best_g, best_oks = g, mat[p, g]
                if best_g >= 0:
                    taken[best_g] = True
                    all_tp.append(True)
                else:
                    all_tp.append(False)
                all_scores.append(scores[p])
        per_threshold[round(thr, 2)] = _interpolated_ap(
            np.asarray(all_scores), np.asarray(all_tp, dtype=bool), n_gt
        )
    mean = float(np.mean(list(per_threshold.values())))
    return ApReport(per_threshold=per_threshold, mean=mean, n_gt=n_gt)


def _model_predictions(
    model: KeypointDetector,
    dataset: Dataset,
    batch_size: int = 16,
    kpq_noise: float = 0.0,
    seed: int = 0,
) -> dict[object, tuple[np.ndarray, np.ndarray]]:
    """Run the detector over a dataset, grouping same-size images into batches."""
    model.eval()
    out: dict[object, tuple[np.ndarray, np.ndarray]] = {}
    images = list(dataset.images)
    start = 0
    chunk_idx = 0
    while start < len(images):
        dims = images[start].pixels.shape
        end = start
        while (
            end < len(images)
            and images[end].pixels.shape == dims
            and end - start < batch_size
        ):
            end += 1
        batch = images[start:end]
        gen = torch.Generator().manual_seed(seed * 100003 + chunk_idx)
        with torch.no_grad():
            preds, _, _ = model.forward_full(
                prepare_images([im.pixels for im in batch]),
                kpq_noise=kpq_noise,
                noise_generator=gen,
            )
        scores = preds.scores.numpy().astype(np.float64)
        coords = preds.keypoints.numpy().astype(np.float64)
        for b, im in enumerate(batch):
            out[im.image_id] = (scores[b], coords[b])
        start = end
        chunk_idx += 1
    return out


def evaluate_model(
    model: KeypointDetector, dataset: Dataset, cfg: EvalConfig = EvalConfig()
) -> ApReport:
    """AP of raw single-pass predictions over a dataset."""
    preds = _model_predictions(model, dataset, batch_size=cfg.batch_size)
    gts = {im.image_id: im.persons for im in dataset}
    return compute_ap(preds, gts, dataset.skeleton.sigma_array, cfg.oks_thresholds)


# -- GT binding and click selection ------------------------------------------


def bind_predictions(
    pred_coords: np.ndarray,
    pred_scores: np.ndarray,
    gts: Sequence[PersonInstance],
    sigmas: np.ndarray,
) -> list[int]:
    """Assign each GT person a distinct prediction slot.

    Predictions claim GTs greedily in descending score order when their OKS
    is at least 0.3; any GT left over takes the highest-score unclaimed slot,
    so every GT always gets one (there must be at least as many slots).
    """
    n_pred = len(pred_coords)
    if n_pred < len(gts):
        raise ValueError(f"{n_pred} prediction slots for {len(gts)} GT persons")
    mat = oks_matrix(np.asarray(pred_coords, np.float64), gts, sigmas)
    order = np.argsort(-np.asarray(pred_scores, np.float64), kind="stable")
    gt_to_pred = [-1] * len(gts)
    used = set()
    for p in order:
        best_g, best_oks = -1, _BIND_MIN_OKS
        for g in range(len(gts)):
            if gt_to_pred[g] < 0 and mat[p, g] >= best_oks:
                best_g, best_oks = g, mat[p, g]
        if best_g >= 0:
            gt_to_pred[best_g] = int(p)
            used.add(int(p))
    free = [int(p) for p in order if int(p) not in used]
    for g in range(len(gts)):
        if gt_to_pred[g] < 0:
            gt_to_pred[g] = free.pop(0)
    return gt_to_pred


def select_click(
    pred_coords: np.ndarray,
    gt_pose: Pose,
    strategy: str,
    rng: np.random.Generator,
    kpt_scores: Optional[np.ndarray] = None,
    exclude: frozenset[int] = frozenset(),
) -> tuple[int, float, float]:
    """Pick which keypoint a simulated annotator corrects next.

    Returns (keypoint_index, gt_x, gt_y). Candidates are labeled keypoints
    not yet excluded; ties resolve to the smallest index.
    """
    candidates = [k for k in np.flatnonzero(gt_pose.labeled_mask) if int(k) not in exclude]
    if not candidates:
        raise ExhaustedError("every labeled keypoint is already excluded")
    cand = np.asarray(candidates, dtype=np.int64)
    if strategy == "worse":
        d = np.linalg.norm(
            np.asarray(pred_coords, np.float64)[cand] - gt_pose.coords[cand], axis=1
        )
        k = int(cand[int(np.argmax(d))])
    elif strategy == "low_score":
        if kpt_scores is None:
            raise ValueError("low_score strategy needs per-keypoint scores")
        k = int(cand[int(np.argmin(np.asarray(kpt_scores, np.float64)[cand]))])
    elif strategy == "random":
        k = int(cand[int(rng.integers(len(cand)))])
    else:
        raise ValueError(f"unknown click strategy {strategy!r}")
    x, y = gt_pose.coords[k]
    return k, float(x), float(y)


# -- simulated annotation ------------------------------------------------------


class SessionLike(Protocol):
    """What the simulators need from a session."""

    def poses_numpy(self) -> np.ndarray: ...

    def scores_numpy(self) -> np.ndarray: ...

    def kpt_scores_numpy(self) -> np.ndarray: ...

    def click(self, instance_index: int, keypoint_index: int, x: float, y: float): ...

    def loop_refine(self): ...


class Engine(Protocol):
    def start(self, pixels: np.ndarray) -> SessionLike: ...


class ModelEngine:
    """Engine backed by a real detector checkpoint."""

    def __init__(self, model: KeypointDetector):
        self.model = model

    def start(self, pixels: np.ndarray) -> AnnotationSession:
        return AnnotationSession.start(self.model, pixels)


@dataclass(frozen=True)
class SimulationReport:
    ap_at_clicks: dict[int, ApReport]
    strategy: str
    mode: str
    loop_enabled: bool

    def mean_ap(self, n_clicks: int) -> float:
        return self.ap_at_clicks[n_clicks].mean


def _sessions_ap(
    sessions: dict[object, SessionLike],
    ground_truth: dict[object, Sequence[PersonInstance]],
    sigmas: np.ndarray,
    thresholds: Sequence[float],
) -> ApReport:
    preds = {
        image_id: (s.scores_numpy(), s.poses_numpy()) for image_id, s in sessions.items()
    }
    return compute_ap(preds, ground_truth, sigmas, thresholds)


def simulate_annotation(
    engine: Engine,
    dataset: Dataset,
    cfg: EvalConfig = EvalConfig(),
    loop_enabled: bool = True,
) -> SimulationReport:
    """Sweep click budgets and measure AP after each round of corrections.

    One round gives each GT person one click. In progressive mode the loop
    runs once per image after each round; in only_once mode all rounds are
    clicked first and a single loop runs at the end. With loops disabled the
    clicks alone move the poses (manual annotation baseline).
    """
    sigmas = dataset.skeleton.sigma_array
    rng = np.random.default_rng(cfg.seed)
    gts = {im.image_id: im.persons for im in dataset}
    sessions: dict[object, SessionLike] = {}
    bindings: dict[object, list[int]] = {}
    clicked: dict[object, list[set[int]]] = {}
    for im in dataset:
        s = engine.start(im.pixels)
        sessions[im.image_id] = s
        bindings[im.image_id] = (
            bind_predictions(s.poses_numpy(), s.scores_numpy(), im.persons, sigmas)
            if im.persons
            else []
        )
        clicked[im.image_id] = [set() for _ in im.persons]

    reports = {0: _sessions_ap(sessions, gts, sigmas, cfg.oks_thresholds)}
    for round_idx in range(1, cfg.clicks_per_instance + 1):
        for im in dataset:
            s = sessions[im.image_id]
            for g, gt in enumerate(im.persons):
                inst = bindings[im.image_id][g]
                try:
                    k, x, y = select_click(
                        s.poses_numpy()[inst],
                        gt.pose,
                        cfg.click_strategy,
                        rng,
                        kpt_scores=s.kpt_scores_numpy()[inst],
                        exclude=frozenset(clicked[im.image_id][g]),
                    )
                except ExhaustedError:
                    continue
                s.click(inst, k, x, y)
                clicked[im.image_id][g].add(k)
            if loop_enabled and cfg.click_mode == "progressive" and im.persons:
                s.loop_refine()
        if loop_enabled and cfg.click_mode == "only_once" and round_idx == cfg.clicks_per_instance:
            for im in dataset:
                if im.persons:
                    sessions[im.image_id].loop_refine()
        reports[round_idx] = _sessions_ap(sessions, gts, sigmas, cfg.oks_thresholds)
    return SimulationReport(
        ap_at_clicks=reports,
        strategy=cfg.click_strategy,
        mode=cfg.click_mode,
        loop_enabled=loop_enabled,
    )


@dataclass(frozen=True)
class NocReport:
    target: float
    per_person: tuple[int, ...]
    mean: float
    reached: tuple[bool, ...]


def noc_at(
    engine: Engine,
    dataset: Dataset,
    target: float,
    cap: int = 20,
    seed: int = 0,
) -> NocReport:
    """Number of clicks until each person's OKS reaches the target.

    Worst-keypoint clicking, one loop after every click, capped at `cap`
    clicks per person (a person that never reaches the target counts as cap).
    """
    sigmas = dataset.skeleton.sigma_array
    rng = np.random.default_rng(seed)
    counts: list[int] = []
    reached: list[bool] = []
    for im in dataset:
        if not im.persons:
            continue
        s = engine.start(im.pixels)
        binding = bind_predictions(s.poses_numpy(), s.scores_numpy(), im.persons, sigmas)
        for g, gt in enumerate(im.persons):
            inst = binding[g]
            used = set()
            n = 0
            ok = compute_oks(s.poses_numpy()[inst], gt, sigmas) >= target
            while not ok and n < cap:
                try:
                    k, x, y = select_click(
                        s.poses_numpy()[inst], gt.pose, "worse", rng,
                        exclude=frozenset(used),
                    )
                except ExhaustedError:
                    break
                s.click(inst, k, x, y)
                s.loop_refine()
                used.add(k)
                n += 1
                ok = compute_oks(s.poses_numpy()[inst], gt, sigmas) >= target
            counts.append(n if ok else cap)
            reached.append(bool(ok))
    return NocReport(
        target=target,
        per_person=tuple(counts),
        mean=float(np.mean(counts)) if counts else float("nan"),
        reached=tuple(reached),
    )


# -- robustness and timing ------------------------------------------------------


def sensitivity_probe(
    model: KeypointDetector,
    dataset: Dataset,
    omegas: Sequence[float] = (0.0, 0.1),
    cfg: EvalConfig = EvalConfig(),
) -> dict[float, ApReport]:
    """AP under uniform noise of half-width omega injected into the keypoint
    position queries before decoding. omega 0 is the clean baseline."""
    gts = {im.image_id: im.persons for im in dataset}
    out: dict[float, ApReport] = {}
    for omega in omegas:
        preds = _model_predictions(
            model, dataset, batch_size=cfg.batch_size, kpq_noise=omega, seed=cfg.seed
        )
        out[float(omega)] = compute_ap(
            preds, gts, dataset.skeleton.sigma_array, cfg.oks_thresholds
        )
    return out


def timing_benchmark(
    model: KeypointDetector, pixels: np.ndarray, n_runs: int = 20
) -> dict[str, float]:
    """Median wall time of a full forward pass vs one feedback loop."""
    model.eval()
    batch = prepare_images(pixels)
    with torch.no_grad():
        model.forward_full(batch)  # warmup
    full_times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        with torch.no_grad():
            model.forward_full(batch)
        full_times.append(time.perf_counter() - t0)

    session = AnnotationSession.start(model, pixels)
    session.loop_refine()  # warmup
    loop_times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        session.loop_refine()
        loop_times.append(time.perf_counter() - t0)
    return {
        "full_median_s": statistics.median(full_times),
        "loop_median_s": statistics.median(loop_times),
        "n_runs": float(n_runs),
    }
