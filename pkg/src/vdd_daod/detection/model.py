"""Detector assembly, parameter groups and the checkpoint archive."""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..disentangle import BaseAligner, DIRExtractor, DomainClassifier, FeatureBundle
from .boxes import clip_boxes, decode_deltas, generate_anchors, nms
from .layers import ANCHOR_SIZES, NUM_CLASSES, RPN, STRIDE, Backbone, DetectionHead
from .roi_align import roi_align

GROUP_NAMES = (
    "backbone_E",
    "dir_extractor",
    "rpn",
    "roi_head_cls",
    "roi_head_reg",
    "domain_classifier",
    "base_aligner",
)

# module-name prefix -> parameter group
_GROUP_PREFIXES = {
    "backbone.": "backbone_E",
    "dir_extractor.": "dir_extractor",
    "rpn.": "rpn",
    "roi_head.fc1.": "roi_head_cls",
    "roi_head.fc2.": "roi_head_cls",
    "roi_head.cls_score.": "roi_head_cls",
    "roi_head.bbox_pred.": "roi_head_reg",
    "domain_classifier.": "domain_classifier",
    "base_aligner.": "base_aligner",
}


class Detector(nn.Module):
    """Toy Faster R-CNN host with an optional VDD plug-in.

    ``method="vdd"`` runs the RPN and heads on ``F_di``; ``"source_only"``
    drops the extractor and domain classifier and runs them on ``F_b``.
    """

    def __init__(
        self,
        method: str = "vdd",
        image_size: int = 128,
        grl_enabled: bool = True,
        grl_lambda: float = 1.0,
        base_align: bool = True,
        base_align_lambda: float = 1.0,
        input_norm: bool = True,
        align_on: str = "f_di",
    ):
        super().__init__()
        if method not in ("vdd", "source_only"):
            raise ValueError(f"unknown method {method!r}")
        if align_on not in ("f_b", "f_di"):
            raise ValueError(f"align_on must be 'f_b' or 'f_di', got {align_on!r}")
        self.align_on = align_on
        self.method = method
        self.image_size = image_size
        self.backbone = Backbone(input_norm)
        self.rpn = RPN()
        self.roi_head = DetectionHead()
        if method == "vdd":
            self.dir_extractor = DIRExtractor()
            self.domain_classifier = DomainClassifier(grl_lambda=grl_lambda if grl_enabled else None)
            if base_align:
                self.base_aligner = BaseAligner(grl_lambda=base_align_lambda)
        feat = image_size // STRIDE
        self.register_buffer("anchors", generate_anchors(feat, feat, STRIDE, ANCHOR_SIZES), persistent=False)
        parameter_groups(self)  # fails fast on an unassigned parameter

    @classmethod
    def from_config(cls, cfg: dict) -> "Detector":
        """Build from a (possibly partial) run-config dict; missing keys take defaults."""
        keys = ("method", "image_size", "grl_enabled", "grl_lambda", "base_align", "base_align_lambda", "input_norm",
                "align_on")
        return cls(**{k: cfg[k] for k in keys if k in cfg})

    @property
    def is_vdd(self) -> bool:
        return self.method == "vdd"

    @property
    def has_base_aligner(self) -> bool:
        return hasattr(self, "base_aligner")

    def features(self, images: torch.Tensor) -> FeatureBundle:
        f_b = self.backbone(images)
        if not self.is_vdd:
            return FeatureBundle(f_b, f_b, torch.zeros_like(f_b))
        return FeatureBundle.decompose(f_b, self.dir_extractor)

    def head_features(self, bundle: FeatureBundle) -> torch.Tensor:
        return bundle.f_di if self.is_vdd else bundle.f_b

    @torch.no_grad()
    def detect(self, image: torch.Tensor, score_thresh: float = 0.05, nms_thresh: float = 0.5,
               max_dets: int = 100) -> dict[str, torch.Tensor]:
        """Inference on one ``3 x H x W`` image: boxes, scores and class ids."""
        if tuple(image.shape[-2:]) != (self.image_size, self.image_size):
            raise ValueError(f"model expects {self.image_size}x{self.image_size} images, got {tuple(image.shape)}")
        bundle = self.features(image[None].to(self.anchors.dtype))
        feat = self.head_features(bundle)[0]
        proposals, _ = self.rpn(feat, self.anchors, self.image_size)
        empty = {"boxes": torch.zeros((0, 4)), "scores": torch.zeros(0), "classes": torch.zeros(0, dtype=torch.long)}
        if len(proposals) == 0:
            return empty
        logits, deltas = self.roi_head(roi_align(feat, proposals))
        probs = F.softmax(logits, dim=1)
        boxes, scores, classes = [], [], []
        for k in range(NUM_CLASSES):
            s = probs[:, k + 1]
            keep = s > score_thresh
            if not keep.any():
                continue
            b = clip_boxes(decode_deltas(proposals[keep], deltas[keep, 4 * k: 4 * k + 4]),
                           self.image_size, self.image_size)
            s = s[keep]
            valid = ((b[:, 2] - b[:, 0]) > 1e-3) & ((b[:, 3] - b[:, 1]) > 1e-3)
            b, s = b[valid], s[valid]
            kept = nms(b, s, nms_thresh)
            boxes.append(b[kept])
            scores.append(s[kept])
            classes.append(torch.full((len(kept),), k, dtype=torch.long))
        if not boxes:
            return empty
        boxes, scores, classes = torch.cat(boxes), torch.cat(scores), torch.cat(classes)
        order = torch.sort(scores, descending=True, stable=True).indices[:max_dets]
        return {"boxes": boxes[order].float(), "scores": scores[order].float(), "classes": classes[order]}


def _group_of(name: str) -> Optional[str]:
    for prefix, group in _GROUP_PREFIXES.items():
        if name.startswith(prefix):
            return group
    return None


def parameter_groups(model: nn.Module) -> dict[str, dict[str, nn.Parameter]]:
    """Partition every trainable parameter into the named groups.

    Groups absent from the model (e.g. ``dir_extractor`` for the source-only
    baseline) map to empty dicts.
    """
    groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in GROUP_NAMES}
    for name, param in model.named_parameters():
        group = _group_of(name)
        if group is None:
            raise ValueError(f"parameter {name!r} is not assigned to any group")
        groups[group][name] = param
    return groups


def snapshot(model: nn.Module) -> dict[str, dict[str, torch.Tensor]]:
    return {g: {n: p.detach().clone() for n, p in ps.items()} for g, ps in parameter_groups(model).items()}


def restore(model: nn.Module, snap: dict[str, dict[str, torch.Tensor]]) -> None:
    with torch.no_grad():
        for g, ps in parameter_groups(model).items():
            for n, p in ps.items():
                p.copy_(snap[g][n])


def group_hash(model: nn.Module, group: str) -> str:
    h = hashlib.sha256()
    for name, p in sorted(parameter_groups(model)[group].items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def set_trainable(model: nn.Module, groups) -> None:
    """Enable gradients for ``groups`` only; clears stale grads everywhere."""
    groups = set(groups)
    for g, ps in parameter_groups(model).items():
        for p in ps.values():
            p.requires_grad_(g in groups)
            p.grad = None


# ---------------------------------------------------------------- checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def _write_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, model: nn.Module, config_hash: str, extra: Optional[dict] = None,
                    optimizer_state: Optional[dict[str, dict[str, torch.Tensor]]] = None) -> Path:
    """Write a byte-deterministic zip of float32 ``.npy`` arrays plus ``header.json``."""
    path = Path(path)
    groups = parameter_groups(model)
    header = {
        "format": "vdd-daod-checkpoint/1",
        "config_hash": config_hash,
        "method": getattr(model, "method", None),
        "groups": {g: {n: list(p.shape) for n, p in sorted(ps.items())} for g, ps in groups.items()},
    }
    header.update(extra or {})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write_member(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for g in GROUP_NAMES:
            for n, p in sorted(groups[g].items()):
                _write_member(zf, f"params/{g}/{n}.npy", _npy_bytes(p.detach().cpu().float().numpy()))
        for opt_name, state in sorted((optimizer_state or {}).items()):
            for n, buf in sorted(state.items()):
                _write_member(zf, f"optimizer/{opt_name}/{n}.npy", _npy_bytes(buf.cpu().float().numpy()))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]], dict[str, dict[str, np.ndarray]]]:
    """Return ``(header, params[group][name], optimizer[opt][name])``."""
    params: dict[str, dict[str, np.ndarray]] = {}
    optim: dict[str, dict[str, np.ndarray]] = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            kind, outer, leaf = name[:-4].split("/", 2)
            arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
            (params if kind == "params" else optim).setdefault(outer, {})[leaf] = arr
    return header, params, optim


def load_into(model: nn.Module, params: dict[str, dict[str, np.ndarray]]) -> None:
    groups = parameter_groups(model)
    with torch.no_grad():
        for g, ps in groups.items():
            stored = params.get(g, {})
            if set(stored) != set(ps):
                raise ValueError(f"checkpoint group {g!r} does not match the model")
            for n, p in ps.items():
                arr = torch.from_numpy(stored[n])
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {n}: {tuple(arr.shape)} vs {tuple(p.shape)}")
                p.copy_(arr)
