"""Backbone, RPN and RoI head of the toy two-stage detector."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import box_iou, clip_boxes, decode_deltas, encode_deltas, nms

FEATURE_CHANNELS = 64
STRIDE = 8
NUM_CLASSES = 3
ANCHOR_SIZES = (16, 32, 64)


INPUT_NORM_EPS = 1e-2


class Backbone(nn.Module):
    """Four 3x3 conv blocks, 3->32->48->64->64, stride 2 on the first three.

    With ``input_norm`` each image is first standardised by its own pixel
    mean and standard deviation (over all channels), which removes global
    gain and offset but keeps colour casts and noise.
    """

    def __init__(self, input_norm: bool = True):
        super().__init__()
        self.input_norm = input_norm
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 48, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(48, 64, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(64, FEATURE_CHANNELS, 3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected N x 3 x H x W, got {tuple(images.shape)}")
        if images.shape[2] % STRIDE or images.shape[3] % STRIDE:
            raise ValueError(f"H and W must be divisible by {STRIDE}")
        if self.input_norm:
            mean = images.mean(dim=(1, 2, 3), keepdim=True)
            std = images.std(dim=(1, 2, 3), keepdim=True)
            images = (images - mean) / (std + INPUT_NORM_EPS)
        x = F.relu(self.conv1(images))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return F.relu(self.conv4(x))


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)


def label_anchors(
    anchors: torch.Tensor,
    gt_boxes: torch.Tensor,
    pos_thresh: float = 0.5,
    neg_thresh: float = 0.3,
    match_best: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (labels, matched gt index); labels 1 = fg, 0 = bg, -1 = ignored.

    With ``match_best`` every gt also marks its highest-IoU anchor(s) positive.
    """
    labels = torch.full((len(anchors),), -1, dtype=torch.long)
    if len(gt_boxes) == 0:
        labels.fill_(0)
        return labels, torch.zeros(len(anchors), dtype=torch.long)
    ious = box_iou(anchors, gt_boxes)
    best_iou, best_gt = ious.max(dim=1)
    labels[best_iou < neg_thresh] = 0
    labels[best_iou >= pos_thresh] = 1
    if match_best:
        per_gt_best = ious.max(dim=0).values
        hits = (ious == per_gt_best[None, :]) & (per_gt_best[None, :] > 0)
        labels[hits.any(dim=1)] = 1
    return labels, best_gt


class RPN(nn.Module):
    """Objectness and box-delta 1x1 conv heads over a C x h x w feature map."""

    def __init__(
        self,
        in_channels: int = FEATURE_CHANNELS,
        num_anchors: int = len(ANCHOR_SIZES),
        pre_nms: int = 256,
        post_nms: int = 64,
        nms_thresh: float = 0.7,
        batch_pos: int = 32,
        batch_neg: int = 32,
        match_best: bool = True,
    ):
        super().__init__()
        self.objectness = nn.Conv2d(in_channels, num_anchors, 1)
        self.deltas = nn.Conv2d(in_channels, num_anchors * 4, 1)
        self.pre_nms = pre_nms
        self.post_nms = post_nms
        self.nms_thresh = nms_thresh
        self.batch_pos = batch_pos
        self.batch_neg = batch_neg
        self.match_best = match_best

    def heads(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-anchor logits ``(A,)`` and deltas ``(A, 4)`` for one ``C x h x w`` map."""
        x = feature[None]
        logits = self.objectness(x)[0].permute(1, 2, 0).reshape(-1)
        deltas = self.deltas(x)[0].permute(1, 2, 0).reshape(-1, 4)
        return logits, deltas

    def propose(self, logits, deltas, anchors, image_size: int) -> torch.Tensor:
        with torch.no_grad():
            k = min(self.pre_nms, len(logits))
            top = torch.topk(logits, k, sorted=True).indices
            boxes = clip_boxes(decode_deltas(anchors[top], deltas[top]), image_size, image_size)
            scores = logits[top]
            wh = boxes[:, 2:] - boxes[:, :2]
            ok = (wh > 1e-3).all(dim=1)
            boxes, scores = boxes[ok], scores[ok]
            keep = nms(boxes, scores, self.nms_thresh, self.post_nms)
            return boxes[keep].detach()

    def loss(self, logits, deltas, anchors, gt_boxes, generator: Optional[torch.Generator] = None):
        labels, matched = label_anchors(anchors, gt_boxes, match_best=self.match_best)
        pos = torch.nonzero(labels == 1).flatten()
        neg = torch.nonzero(labels == 0).flatten()
        pos = pos[torch.randperm(len(pos), generator=generator)[: self.batch_pos]]
        # pad with negatives when positives run short
        n_neg = self.batch_pos + self.batch_neg - len(pos)
        neg = neg[torch.randperm(len(neg), generator=generator)[:n_neg]]
        idx = torch.cat([pos, neg])
        target = (labels[idx] == 1).to(logits.dtype)
        l_obj = F.binary_cross_entropy_with_logits(logits[idx], target)
        if len(pos):
            reg_t = encode_deltas(anchors[pos], gt_boxes[matched[pos]])
            l_reg = smooth_l1(deltas[pos] - reg_t).sum(dim=1).mean()
        else:
            l_reg = deltas.sum() * 0.0
        return l_obj + l_reg

    def forward(self, feature, anchors, image_size: int, gt_boxes=None, generator=None, need_loss=False):
        """Proposals for one image plus the RPN loss when ``gt_boxes`` is given."""
        if need_loss and gt_boxes is None:
            raise ValueError("RPN loss requested without ground truth")
        logits, deltas = self.heads(feature)
        proposals = self.propose(logits, deltas, anchors, image_size)
        if gt_boxes is None:
            return proposals, None
        return proposals, self.loss(logits, deltas, anchors, gt_boxes, generator)


class DetectionHead(nn.Module):
    """flatten -> FC 256 -> FC 256 -> class logits (K+1) and class-specific deltas (4K)."""

    def __init__(self, in_channels: int = FEATURE_CHANNELS, pool: int = 7, hidden: int = 256,
                 num_classes: int = NUM_CLASSES):
        super().__init__()
        self.fc1 = nn.Linear(in_channels * pool * pool, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls_score = nn.Linear(hidden, num_classes + 1)
        self.bbox_pred = nn.Linear(hidden, num_classes * 4)
        self.num_classes = num_classes

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.fc1(pooled.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x)


def match_proposals(proposals, gt_boxes, gt_classes, iou_thresh: float = 0.5):
    """Head targets: label 0 = background, ``class_id + 1`` otherwise, and regression targets."""
    n = len(proposals)
    labels = torch.zeros(n, dtype=torch.long)
    targets = torch.zeros((n, 4), dtype=proposals.dtype)
    if n == 0 or len(gt_boxes) == 0:
        return labels, targets
    best_iou, best_gt = box_iou(proposals, gt_boxes).max(dim=1)
    fg = best_iou >= iou_thresh
    labels[fg] = gt_classes[best_gt[fg]] + 1
    if fg.any():
        targets[fg] = encode_deltas(proposals[fg], gt_boxes[best_gt[fg]]).to(targets.dtype)
    return labels, targets


def detection_loss(class_logits, box_deltas, labels, reg_targets, l_rpn):
    """L_det = L_cls + L_loc + L_rpn, with the parts returned separately.

    L_cls is mean cross-entropy over all proposals; L_loc is the smooth-L1
    on the deltas of the matched class, summed over coordinates and averaged
    over positive proposals (zero when there are none).
    """
    l_cls = F.cross_entropy(class_logits, labels)
    fg = torch.nonzero(labels > 0).flatten()
    if len(fg):
        cls = labels[fg] - 1
        cols = (cls[:, None] * 4 + torch.arange(4)[None, :])
        pred = box_deltas[fg[:, None], cols]
        l_loc = smooth_l1(pred - reg_targets[fg]).sum(dim=1).mean()
    else:
        l_loc = box_deltas.sum() * 0.0
    return {"l_cls": l_cls, "l_loc": l_loc, "l_rpn": l_rpn, "l_det": l_cls + l_loc + l_rpn}
