"""Toy query-based keypoint detector.

Pipeline: patch-embed encoder over image tokens, a human decoder that
refines N learnable box queries, keypoint queries spawned per human from a
learnable per-keypoint codebook, and a human-to-keypoint decoder that
refines boxes and keypoint coordinates layer by layer in logit space.

The human-to-keypoint decoder is the single entry point for predicted,
error and user-modified keypoint queries, so all three paths share one
code path and one set of weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

__all__ = [
    "ModelConfig",
    "QueryOrigin",
    "FeatureMap",
    "HumanQuerySet",
    "KeypointQuerySet",
    "Predictions",
    "KeypointDetector",
    "embed_labels",
    "prepare_images",
    "inverse_sigmoid",
    "sample_point_features",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    channel_dim must be divisible by n_heads (attention) and by 4 (the 2-D
    sine position encoding splits it across two coordinates, sin and cos).
    n_h2k_layers must be at least 2 so refinement happens layer by layer.
    """

    channel_dim: int = 256
    n_human_queries: int = 20
    n_encoder_layers: int = 3
    n_human_layers: int = 2
    n_h2k_layers: int = 3
    n_keypoints: int = 17
    patch_size: int = 16
    n_heads: int = 8
    ffn_dim: Optional[int] = None

    def __post_init__(self) -> None:
        for name in (
            "channel_dim",
            "n_human_queries",
            "n_encoder_layers",
            "n_human_layers",
            "n_h2k_layers",
            "n_keypoints",
            "patch_size",
            "n_heads",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.channel_dim % self.n_heads != 0:
            raise ValueError("channel_dim must be divisible by n_heads")
        if self.channel_dim % 4 != 0:
            raise ValueError("channel_dim must be divisible by 4")
        if self.n_h2k_layers < 2:
            raise ValueError("layer-by-layer refinement needs n_h2k_layers >= 2")

    @property
    def resolved_ffn_dim(self) -> int:
        return self.ffn_dim if self.ffn_dim is not None else 4 * self.channel_dim


class QueryOrigin(Enum):
    PREDICTED = "predicted"
    ERROR = "error"
    MODIFIED = "modified"


@dataclass
class FeatureMap:
    """Encoded image tokens with their positional encodings."""

    tokens: Tensor  # (B, L, C)
    pos: Tensor  # (L, C)
    source_dims: tuple[int, int]  # (H, W)
    grid: tuple[int, int]  # (gh, gw)


@dataclass
class HumanQuerySet:
    """Human queries after decoding: boxes, contents, scores, per-layer aux."""

    boxes: Tensor  # (B, N, 4) normalized cxcywh
    contents: Tensor  # (B, N, C)
    score_logits: Tensor  # (B, N)
    layer_boxes: tuple[Tensor, ...] = ()
    layer_score_logits: tuple[Tensor, ...] = ()

    @property
    def scores(self) -> Tensor:
        return torch.sigmoid(self.score_logits)


@dataclass
class KeypointQuerySet:
    """Keypoint position/content query pairs for one of the three origins."""

    positions: Tensor  # (B, N, K, 2)
    contents: Tensor  # (B, N, K, C)
    origin: QueryOrigin


@dataclass
class Predictions:
    """Decoder outputs plus per-layer snapshots for auxiliary supervision."""

    boxes: Tensor  # (B, N, 4)
    keypoints: Tensor  # (B, N, K, 2)
    score_logits: Tensor  # (B, N)
    kpt_score_logits: Tensor  # (B, N, K)
    human_contents: Tensor  # (B, N, C)
    kpt_contents: Tensor  # (B, N, K, C)
    layer_keypoints: tuple[Tensor, ...]
    layer_boxes: tuple[Tensor, ...]
    layer_score_logits: tuple[Tensor, ...]
    origin: QueryOrigin

    def __post_init__(self) -> None:
        if not torch.isfinite(self.keypoints).all() or not torch.isfinite(self.boxes).all():
            raise ValueError("predictions contain non-finite coordinates")

    @property
    def scores(self) -> Tensor:
        return torch.sigmoid(self.score_logits)

    @property
    def kpt_scores(self) -> Tensor:
        return torch.sigmoid(self.kpt_score_logits)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    return torch.logit(x.clamp(min=0.0, max=1.0), eps=eps)


def prepare_images(pixels) -> Tensor:
    """Convert H x W x 3 uint8 buffers (one or a list) to a (B, 3, H, W) float tensor."""
    if isinstance(pixels, np.ndarray) and pixels.ndim == 3:
        pixels = [pixels]
    arrays = [np.asarray(p, dtype=np.float32) / 255.0 - 0.5 for p in pixels]
    batch = np.stack(arrays)
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def embed_labels(labels, codebook: nn.Embedding) -> Tensor:
    """Look up content vectors for keypoint-class labels; row j of the output
    equals codebook row labels[j] exactly."""
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(labels.astype(np.int64))
    elif not isinstance(labels, Tensor):
        labels = torch.as_tensor(labels, dtype=torch.int64)
    k = codebook.num_embeddings
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels outside [0, {k})")
    return codebook(labels)


# ---------------------------------------------------------------------------
# Position encodings
# ---------------------------------------------------------------------------

_SINE_TEMPERATURE = 10000.0


def _coord_sine(t: Tensor, num: int) -> Tensor:
    """Sine/cosine features of a normalized scalar coordinate, (...,) -> (..., num)."""
    dim_t = torch.arange(num, dtype=t.dtype, device=t.device)
    dim_t = _SINE_TEMPERATURE ** (2.0 * torch.div(dim_t, 2, rounding_mode="floor") / num)
    angles = t.unsqueeze(-1) * (2.0 * math.pi) / dim_t
    out = torch.empty_like(angles)
    out[..., 0::2] = angles[..., 0::2].sin()
    out[..., 1::2] = angles[..., 1::2].cos()
    return out


def point_position_embedding(points: Tensor, dim: int) -> Tensor:
    """Embed normalized (x, y) points into dim channels, (..., 2) -> (..., dim)."""
    half = dim // 2
    return torch.cat(
        [_coord_sine(points[..., 1], half), _coord_sine(points[..., 0], half)], dim=-1
    )


def grid_position_embedding(gh: int, gw: int, dim: int, dtype=torch.float32) -> Tensor:
    """(gh * gw, dim) sine encoding of patch-center coordinates, row-major."""
    ys = (torch.arange(gh, dtype=dtype) + 0.5) / gh
    xs = (torch.arange(gw, dtype=dtype) + 0.5) / gw
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([xx, yy], dim=-1).reshape(-1, 2)
    return point_position_embedding(pts, dim)


def sample_point_features(fm: FeatureMap, points: Tensor) -> Tensor:
    """Bilinear-sample encoder tokens at normalized (x, y) points.

    points is (B, ..., 2) in [0, 1]; returns (B, ..., C). Token (i, j) is
    treated as covering its patch, so its center sits at ((j+0.5)/gw,
    (i+0.5)/gh), the same convention as grid_position_embedding.
    """
    b, _, c = fm.tokens.shape
    gh, gw = fm.grid
    maps = fm.tokens.transpose(1, 2).reshape(b, c, gh, gw)
    grid = points.reshape(b, -1, 1, 2) * 2.0 - 1.0
    out = F.grid_sample(
        maps, grid, mode="bilinear", padding_mode="border", align_corners=False
    )
    return out.squeeze(-1).transpose(1, 2).reshape(*points.shape[:-1], c)


# ---------------------------------------------------------------------------
# Transformer building blocks
# ---------------------------------------------------------------------------

def _mlp(in_dim: int, hidden: int, out_dim: int, n_layers: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(n_layers - 1):
        layers += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


class _FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class _EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channel_dim
        self.attn = nn.MultiheadAttention(c, cfg.n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(c)
        self.ffn = _FFN(c, cfg.resolved_ffn_dim)
        self.norm2 = nn.LayerNorm(c)

    def forward(self, x: Tensor, pos: Tensor) -> Tensor:
        q = x + pos
        x = self.norm1(x + self.attn(q, q, x, need_weights=False)[0])
        return self.norm2(x + self.ffn(x))


class _DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.channel_dim
        self.self_attn = nn.MultiheadAttention(c, cfg.n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(c)
        self.cross_attn = nn.MultiheadAttention(c, cfg.n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(c)
        self.ffn = _FFN(c, cfg.resolved_ffn_dim)
        self.norm3 = nn.LayerNorm(c)

    def forward(
        self,
        x: Tensor,
        query_pos: Tensor,
        memory: Tensor,
        memory_pos: Tensor,
        self_attn_mask: Optional[Tensor] = None,
    ) -> Tensor:
        q = x + query_pos
        x = self.norm1(x + self.self_attn(q, q, x, attn_mask=self_attn_mask, need_weights=False)[0])
        x = self.norm2(
            x
            + self.cross_attn(
                x + query_pos, memory + memory_pos, memory, need_weights=False
            )[0]
        )
        return self.norm3(x + self.ffn(x))


# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------

class KeypointDetector(nn.Module):
    """End-to-end multi-person keypoint detector at toy scale.

    call_counts tracks how often each stage ran, so tests can assert that
    the interactive loop touches only the human-to-keypoint decoder.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channel_dim

        self.patch_embed = nn.Conv2d(3, c, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.encoder_layers = nn.ModuleList(
            _EncoderLayer(cfg) for _ in range(cfg.n_encoder_layers)
        )

        self.human_content = nn.Embedding(cfg.n_human_queries, c)
        self.human_anchor = nn.Embedding(cfg.n_human_queries, 4)
        self.human_layers = nn.ModuleList(
            _DecoderLayer(cfg) for _ in range(cfg.n_human_layers)
        )
        # Heads are per decoder layer: a shared head would have to serve every
        # refinement stage at once, which collapses the later deltas to zero.
        self.human_box_head = nn.ModuleList(
            _mlp(c, c, 4, 3) for _ in range(cfg.n_human_layers)
        )
        self.human_score_head = nn.ModuleList(
            nn.Linear(c, 1) for _ in range(cfg.n_human_layers)
        )

        self.codebook = nn.Embedding(cfg.n_keypoints, c)
        # Human-token content used when keypoint queries are built around GT
        # boxes instead of detected humans (error-modeling training phase).
        self.gt_human_content = nn.Embedding(1, c)

        self.h2k_layers = nn.ModuleList(_DecoderLayer(cfg) for _ in range(cfg.n_h2k_layers))
        # Injects the encoder feature sampled at each keypoint's current
        # estimate into its token before every layer. Attention over patch
        # tokens resolves position only to patch granularity; the sampled
        # feature is what lets a refinement step see sub-patch evidence.
        self.kpt_sample_proj = nn.ModuleList(
            nn.Linear(c, c) for _ in range(cfg.n_h2k_layers)
        )
        self.kpt_delta_head = nn.ModuleList(
            _mlp(c, c, 2, 3) for _ in range(cfg.n_h2k_layers)
        )
        self.h2k_box_head = nn.ModuleList(
            _mlp(c, c, 4, 3) for _ in range(cfg.n_h2k_layers)
        )
        self.h2k_score_head = nn.ModuleList(
            nn.Linear(c, 1) for _ in range(cfg.n_h2k_layers)
        )
        self.kpt_conf_head = nn.Linear(c, 1)

        self._init_transformer()
        self._init_anchors()
        self._init_heads()
        self._group_masks: dict[tuple[int, int], Tensor] = {}
        self.call_counts = {"extract_features": 0, "decode_humans": 0, "decode_keypoints": 0}

    def _init_anchors(self) -> None:
        """Spread initial human anchors on a grid so queries cover the canvas."""
        n = self.cfg.n_human_queries
        g = math.ceil(math.sqrt(n))
        boxes = []
        for i in range(n):
            cx = (i % g + 0.5) / g
            cy = (i // g + 0.5) / g
            boxes.append([cx, cy, 0.35, 0.45])
        with torch.no_grad():
            self.human_anchor.weight.copy_(inverse_sigmoid(torch.tensor(boxes)))

    def _init_transformer(self) -> None:
        """Xavier-uniform init over the attention/FFN stacks; the default
        fan-in scaling is too peaked for post-norm transformer training."""
        for module in (self.encoder_layers, self.human_layers, self.h2k_layers):
            for p in module.parameters():
                if p.dim() > 1:
                    nn.init.xavier_uniform_(p)

    def _init_heads(self) -> None:
        """Zero the last linear of every coordinate head so each decoder layer
        starts as an identity refinement, and bias score heads toward a low
        initial probability. Both are needed for stable set-based training."""
        with torch.no_grad():
            for heads in (self.human_box_head, self.kpt_delta_head, self.h2k_box_head):
                for head in heads:
                    last = head[-1]
                    last.weight.zero_()
                    last.bias.zero_()
            for heads in (self.human_score_head, self.h2k_score_head):
                for head in heads:
                    head.bias.fill_(-2.0)

    def reset_call_counts(self) -> None:
        for key in self.call_counts:
            self.call_counts[key] = 0

    # -- stages ------------------------------------------------------------

    def extract_features(self, images: Tensor) -> FeatureMap:
        """Patch-embed and encode an image batch into tokens."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        _, _, h, w = images.shape
        p = self.cfg.patch_size
        if h % p or w % p:
            raise ValueError(f"image dims {h}x{w} not divisible by patch size {p}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (B, L, C)
        gh, gw = h // p, w // p
        pos = grid_position_embedding(gh, gw, self.cfg.channel_dim, dtype=x.dtype).to(x.device)
        for layer in self.encoder_layers:
            x = layer(x, pos)
        self.call_counts["extract_features"] += 1
        return FeatureMap(tokens=x, pos=pos, source_dims=(h, w), grid=(gh, gw))

    def decode_humans(self, fm: FeatureMap) -> HumanQuerySet:
        """Refine the learnable human queries against the image tokens."""
        b = fm.tokens.shape[0]
        n = self.cfg.n_human_queries
        contents = self.human_content.weight.unsqueeze(0).expand(b, n, -1)
        box_logits = self.human_anchor.weight.unsqueeze(0).expand(b, n, -1)
        mem_pos = fm.pos.unsqueeze(0)

        layer_boxes: list[Tensor] = []
        layer_scores: list[Tensor] = []
        for i, layer in enumerate(self.human_layers):
            boxes = torch.sigmoid(box_logits)
            qpos = point_position_embedding(boxes[..., :2], self.cfg.channel_dim)
            contents = layer(contents, qpos, fm.tokens, mem_pos)
            box_logits = box_logits + self.human_box_head[i](contents)
            layer_boxes.append(torch.sigmoid(box_logits))
            layer_scores.append(self.human_score_head[i](contents).squeeze(-1))
            # each layer refines from a fixed base: its own snapshot loss is
            # the only gradient path into its delta
            box_logits = box_logits.detach()

        self.call_counts["decode_humans"] += 1
        return HumanQuerySet(
            boxes=layer_boxes[-1],
            contents=contents,
            score_logits=layer_scores[-1],
            layer_boxes=tuple(layer_boxes),
            layer_score_logits=tuple(layer_scores),
        )

    def init_keypoint_queries(self, humans: HumanQuerySet) -> KeypointQuerySet:
        """Spawn K keypoint queries per human: grid positions inside the box,
        contents = human content + codebook row."""
        k = self.cfg.n_keypoints
        g = math.ceil(math.sqrt(k))
        idx = torch.arange(k, dtype=humans.boxes.dtype, device=humans.boxes.device)
        frac_x = ((idx % g) + 0.5) / g - 0.5
        frac_y = (torch.div(idx, g, rounding_mode="floor") + 0.5) / g - 0.5
        frac = torch.stack([frac_x, frac_y], dim=-1)  # (K, 2), strictly inside (-.5, .5)

        centers = humans.boxes[..., :2].unsqueeze(2)  # (B, N, 1, 2)
        sizes = humans.boxes[..., 2:].unsqueeze(2)
        positions = centers + frac.view(1, 1, k, 2) * sizes
        contents = humans.contents.unsqueeze(2) + self.codebook.weight.view(1, 1, k, -1)
        return KeypointQuerySet(positions=positions, contents=contents, origin=QueryOrigin.PREDICTED)

    def _group_mask(self, n: int, k: int, device) -> Tensor:
        """Self-attention mask keeping each person group (human + K keypoints)
        independent of the others; True blocks attention."""
        key = (n, k)
        if key not in self._group_masks:
            size = n * (1 + k)
            mask = torch.ones(size, size, dtype=torch.bool)
            for i in range(n):
                lo, hi = i * (1 + k), (i + 1) * (1 + k)
                mask[lo:hi, lo:hi] = False
            self._group_masks[key] = mask
        return self._group_masks[key].to(device)

    def decode_keypoints(
        self, fm: FeatureMap, humans: HumanQuerySet, kps: KeypointQuerySet
    ) -> Predictions:
        """Refine keypoint and box coordinates layer by layer.

        Accepts predicted, error and user-modified keypoint queries
        identically; per-layer coordinate snapshots are recorded for
        auxiliary supervision.
        """
        b, n, k, c = kps.contents.shape
        if humans.boxes.shape[1] != n:
            raise ValueError(
                f"human query count {humans.boxes.shape[1]} != keypoint group count {n}"
            )
        if k != self.cfg.n_keypoints:
            raise ValueError(f"expected {self.cfg.n_keypoints} keypoints per group, got {k}")

        human_tok = humans.contents
        kpt_tok = kps.contents
        box_logits = inverse_sigmoid(humans.boxes)
        kpt_logits = inverse_sigmoid(kps.positions)
        mask = self._group_mask(n, k, kpt_tok.device)
        mem_pos = fm.pos.unsqueeze(0)

        layer_kpts: list[Tensor] = []
        layer_boxes: list[Tensor] = []
        layer_scores: list[Tensor] = []
        for i, layer in enumerate(self.h2k_layers):
            boxes = torch.sigmoid(box_logits)
            kpts = torch.sigmoid(kpt_logits)
            hpos = point_position_embedding(boxes[..., :2], c).unsqueeze(2)  # (B,N,1,C)
            kpos = point_position_embedding(kpts, c)  # (B,N,K,C)
            qpos = torch.cat([hpos, kpos], dim=2).reshape(b, n * (1 + k), c)
            kpt_tok = kpt_tok + self.kpt_sample_proj[i](sample_point_features(fm, kpts))
            seq = torch.cat([human_tok.unsqueeze(2), kpt_tok], dim=2).reshape(b, n * (1 + k), c)

            seq = layer(seq, qpos, fm.tokens, mem_pos, self_attn_mask=mask)
            grouped = seq.reshape(b, n, 1 + k, c)
            human_tok = grouped[:, :, 0, :]
            kpt_tok = grouped[:, :, 1:, :]

            kpt_logits = kpt_logits + self.kpt_delta_head[i](kpt_tok)
            box_logits = box_logits + self.h2k_box_head[i](human_tok)
            layer_kpts.append(torch.sigmoid(kpt_logits))
            layer_boxes.append(torch.sigmoid(box_logits))
            layer_scores.append(self.h2k_score_head[i](human_tok).squeeze(-1))
            # fixed-base refinement, as in the human decoder
            kpt_logits = kpt_logits.detach()
            box_logits = box_logits.detach()

        self.call_counts["decode_keypoints"] += 1
        return Predictions(
            boxes=layer_boxes[-1],
            keypoints=layer_kpts[-1],
            score_logits=layer_scores[-1],
            kpt_score_logits=self.kpt_conf_head(kpt_tok).squeeze(-1),
            human_contents=human_tok,
            kpt_contents=kpt_tok,
            layer_keypoints=tuple(layer_kpts),
            layer_boxes=tuple(layer_boxes),
            layer_score_logits=tuple(layer_scores),
            origin=kps.origin,
        )

    # -- composition ---------------------------------------------------------

    def forward_full(
        self,
        images: Tensor,
        kpq_noise: float = 0.0,
        noise_generator: Optional[torch.Generator] = None,
    ) -> tuple[Predictions, HumanQuerySet, FeatureMap]:
        """Full pass returning predictions plus the reusable intermediate state.

        kpq_noise > 0 adds uniform noise in [-kpq_noise, kpq_noise] to the
        keypoint position queries entering the keypoint decoder (the
        query-sensitivity probe).
        """
        fm = self.extract_features(images)
        humans = self.decode_humans(fm)
        kps = self.init_keypoint_queries(humans)
        if kpq_noise > 0.0:
            noise = (
                torch.rand(
                    kps.positions.shape,
                    generator=noise_generator,
                    dtype=kps.positions.dtype,
                    device=kps.positions.device,
                )
                * 2.0
                - 1.0
            ) * kpq_noise
            kps = KeypointQuerySet(
                positions=(kps.positions + noise).clamp(0.0, 1.0),
                contents=kps.contents,
                origin=kps.origin,
            )
        preds = self.decode_keypoints(fm, humans, kps)
        return preds, humans, fm

    def forward(self, images: Tensor) -> Predictions:
        """End-to-end inference; instances are selected downstream purely by
        score threshold, with no non-maximum suppression."""
        return self.forward_full(images)[0]
