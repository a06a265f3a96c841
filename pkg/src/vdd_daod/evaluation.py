"""VOC-style scoring: per-class AP at IoU 0.5 and their mean."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .detection.boxes import box_iou
from .synth import CLASSES, load_image, load_manifest, read_jsonl


@dataclass
class Detection:
    file: str
    class_id: int
    box: list
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")

    def to_record(self) -> dict:
        return {"file": self.file, "class": self.class_id, "box": [float(v) for v in self.box],
                "score": float(self.score)}


@dataclass
class EvalTable:
    ap: dict = field(default_factory=dict)  # class name -> AP or None when the class has no gt
    mAP: Optional[float] = None

    @classmethod
    def from_aps(cls, aps: dict) -> "EvalTable":
        defined = [v for v in aps.values() if v is not None]
        return cls(dict(aps), float(np.mean(defined)) if defined else None)

    def to_json(self) -> str:
        return json.dumps({"ap": self.ap, "mAP": self.mAP}, indent=1, sort_keys=True)

    def to_text(self, method: str = "model") -> str:
        names = list(self.ap)
        header = "| Method | " + " | ".join(names) + " | mAP |"
        rule = "|" + "---|" * (len(names) + 2)

        def pct(v):
            return "  -  " if v is None else f"{100 * v:.1f}"

        row = f"| {method} | " + " | ".join(pct(self.ap[n]) for n in names) + f" | {pct(self.mAP)} |"
        return "\n".join([header, rule, row]) + "\n"


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh: float = 0.5) -> list[bool]:
    """TP/FP flags for one image and one class, detections taken in score order.

    Each detection claims the highest-IoU gt not yet claimed, provided that
    IoU reaches ``iou_thresh``. Flags are returned in the input order.
    """
    det_boxes = torch.as_tensor(det_boxes, dtype=torch.float64).reshape(-1, 4)
    gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
    n = len(det_boxes)
    flags = [False] * n
    if n == 0 or len(gt_boxes) == 0:
        return flags
    order = torch.sort(torch.as_tensor(det_scores, dtype=torch.float64), descending=True, stable=True).indices
    ious = box_iou(det_boxes, gt_boxes)
    claimed = torch.zeros(len(gt_boxes), dtype=torch.bool)
    for i in order.tolist():
        cand = ious[i].masked_fill(claimed, -1.0)
        j = int(cand.argmax())
        if cand[j] >= iou_thresh:
            claimed[j] = True
            flags[i] = True
    return flags


def average_precision(flags: Sequence[bool], scores: Sequence[float], n_gt: int) -> Optional[float]:
    """All-points AP: area under the PR curve with a monotone precision envelope.

    Computed in exact rational arithmetic. ``None`` when ``n_gt == 0``.
    """
    if n_gt == 0:
        return None
    if len(flags) == 0:
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: -scores[i])  # sorted() is stable
    tp = fp = 0
    recall, precision = [], []
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        recall.append(Fraction(tp, n_gt))
        precision.append(Fraction(tp, tp + fp))
    # envelope: precision at each rank is the max precision at any later rank
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    ap, prev = Fraction(0), Fraction(0)
    for r, p in zip(recall, precision):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def evaluate_detections(detections: list[Detection], ground_truth: dict, num_classes: int = len(CLASSES),
                        iou_thresh: float = 0.5) -> EvalTable:
    """Score detections against ``ground_truth[file] = (boxes, classes)``."""
    aps = {}
    for k in range(num_classes):
        n_gt = sum(int((np.asarray(cls) == k).sum()) for _, cls in ground_truth.values())
        flags: list[bool] = []
        scores: list[float] = []
        by_file: dict[str, list[Detection]] = {}
        for det in detections:
            if det.class_id == k:
                by_file.setdefault(det.file, []).append(det)
        for file, dets in by_file.items():
            boxes, cls = ground_truth.get(file, ([], []))
            gt = [b for b, c in zip(boxes, cls) if c == k]
            flags.extend(match_detections([d.box for d in dets], [d.score for d in dets], gt, iou_thresh))
            scores.extend(d.score for d in dets)
        aps[CLASSES[k]] = average_precision(flags, scores, n_gt)
    return EvalTable.from_aps(aps)


def load_ground_truth(corpus_dir, split: str) -> dict:
    """Oracle boxes for ``split``; labelled source splits serve as their own oracle."""
    corpus_dir = Path(corpus_dir)
    entry = load_manifest(corpus_dir)["splits"][split]
    path = entry["oracle"] or (entry["annotations"] if entry["domain"] == 0 else None)
    if path is None or not (corpus_dir / path).exists():
        raise FileNotFoundError(f"no oracle annotations for split {split!r}")
    return {r["file"]: (r["boxes"], r["classes"]) for r in read_jsonl(corpus_dir / path)}


def run_detector(model, corpus_dir, files: list[str], score_thresh: float = 0.05,
                 nms_thresh: float = 0.5) -> list[Detection]:
    corpus_dir = Path(corpus_dir)
    detections = []
    for file in files:
        image = torch.from_numpy(load_image(corpus_dir / file).transpose(2, 0, 1).copy())
        out = model.detect(image, score_thresh, nms_thresh)
        for box, score, cls in zip(out["boxes"].tolist(), out["scores"].tolist(), out["classes"].tolist()):
            if box[0] < box[2] and box[1] < box[3]:
                detections.append(Detection(file, int(cls), box, min(max(float(score), 0.0), 1.0)))
    return detections


def evaluate_corpus(checkpoint, corpus_dir, split: str, score_thresh: float = 0.05, nms_thresh: float = 0.5,
                    out_dir=None) -> EvalTable:
    """Run the full detector over ``split`` and score it against the oracle."""
    from .trainer import model_from_checkpoint

    gt = load_ground_truth(corpus_dir, split)
    model = model_from_checkpoint(checkpoint)
    detections = run_detector(model, corpus_dir, sorted(gt), score_thresh, nms_thresh)
    table = evaluate_detections(detections, gt)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"detections_{split}.jsonl", "w") as f:
            for det in detections:
                f.write(json.dumps(det.to_record(), sort_keys=True) + "\n")
        (out / f"eval_{split}.json").write_text(table.to_json() + "\n")
        (out / f"eval_{split}.txt").write_text(table.to_text(model.method))
    return table
