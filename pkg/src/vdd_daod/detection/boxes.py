"""Box primitives: IoU, delta encoding, greedy NMS and anchor grids.

Array-level functions take ``(N, 4)`` tensors in ``(x1, y1, x2, y2)`` pixel
coordinates with the origin at the top-left corner.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

# exp() of larger log-ratios overflows float32 box sizes
DELTA_CLAMP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    class_id: Optional[int] = None

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_list()}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clipped(self, width: float, height: float) -> "Box":
        return Box(
            min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height),
            self.score, self.class_id,
        )


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix of shape ``(len(a), len(b))``."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def encode_deltas(anchors: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """(dx, dy, dw, dh): center offsets over anchor size, log size ratios.

    Arithmetic runs in float64 and is cast back, so a decode of an encode
    reproduces the boxes to within one rounding of the input dtype.
    """
    dtype = targets.dtype
    anchors, targets = anchors.double(), targets.double()
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    if bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise ValueError("degenerate anchor")
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    tw = targets[..., 2] - targets[..., 0]
    th = targets[..., 3] - targets[..., 1]
    tx = targets[..., 0] + 0.5 * tw
    ty = targets[..., 1] + 0.5 * th
    return torch.stack([(tx - ax) / aw, (ty - ay) / ah, torch.log(tw / aw), torch.log(th / ah)], dim=-1).to(dtype)


def decode_deltas(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    dtype = deltas.dtype
    anchors, deltas = anchors.double(), deltas.double()
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    if bool((aw <= 0).any()) or bool((ah <= 0).any()):
        raise ValueError("degenerate anchor")
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * torch.exp(deltas[..., 2].clamp(max=DELTA_CLAMP))
    h = ah * torch.exp(deltas[..., 3].clamp(max=DELTA_CLAMP))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1).to(dtype)


def clip_boxes(boxes: torch.Tensor, height: float, width: float) -> torch.Tensor:
    x = boxes[..., 0::2].clamp(0, width)
    y = boxes[..., 1::2].clamp(0, height)
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], dim=-1)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_thresh: float = 0.7,
        max_keep: Optional[int] = None) -> list[int]:
    """Greedy NMS, highest score first, ties broken by lower index.

    ``max_keep`` stops early once that many boxes survive.
    """
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    n = len(boxes)
    if n == 0:
        return []
    # stable descending sort keeps the lower index first among equal scores
    order = torch.sort(scores, descending=True, stable=True).indices
    ious = box_iou(boxes[order], boxes[order])
    suppressed = torch.zeros(n, dtype=torch.bool)
    keep: list[int] = []
    for rank in range(n):
        if suppressed[rank]:
            continue
        keep.append(int(order[rank]))
        if max_keep is not None and len(keep) >= max_keep:
            break
        suppressed |= ious[rank] > iou_thresh
    return keep


def generate_anchors(
    feat_h: int,
    feat_w: int,
    stride: int = 8,
    sizes: Sequence[float] = (16, 32, 64),
    ratios: Sequence[float] = (1.0,),
) -> torch.Tensor:
    """Anchors centred on feature cells, ordered row-major by cell, then by size.

    ``ratio`` is height / width at constant area.
    """
    if feat_h <= 0 or feat_w <= 0:
        raise ValueError("feature dims must be positive")
    shapes = []
    for size in sizes:
        for ratio in ratios:
            w = size / math.sqrt(ratio)
            shapes.append((w, w * ratio))
    base = torch.tensor([[-w / 2, -h / 2, w / 2, h / 2] for w, h in shapes], dtype=torch.float32)
    cy = torch.arange(feat_h, dtype=torch.float32) * stride + stride / 2
    cx = torch.arange(feat_w, dtype=torch.float32) * stride + stride / 2
    yy, xx = torch.meshgrid(cy, cx, indexing="ij")
    centers = torch.stack([xx, yy, xx, yy], dim=-1).reshape(-1, 1, 4)
    return (centers + base[None]).reshape(-1, 4)
