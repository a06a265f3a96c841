"""Two-step optimization: feature decomposition, then feature orthogonalization.

Every iteration draws one source and one target image. The decomposition
step updates every parameter group with the detection and domain losses.
The orthogonalization step adds the orthogonal loss and updates only the
DIR extractor, the domain classifier and the RoI heads; the backbone and
RPN run forward but stay bit-frozen.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .detection.layers import detection_loss, match_proposals
from .detection.model import (
    Detector,
    parameter_groups,
    read_checkpoint,
    load_into,
    save_checkpoint,
    set_trainable,
)
from .detection.roi_align import roi_align
from .disentangle import DomainPrediction, PooledPair, difference_decompose, domain_loss, orthogonal_loss
from .synth import ImageSample, load_image, load_manifest, read_jsonl

log = logging.getLogger(__name__)

STEP1_GROUPS = ("backbone_E", "dir_extractor", "rpn", "roi_head_cls", "roi_head_reg",
                "domain_classifier", "base_aligner")
STEP2_GROUPS = ("dir_extractor", "domain_classifier", "roi_head_cls", "roi_head_reg")
_STEP_CODES = {"decomposition": 1, "orthogonalization": 2, "joint": 3}


class NonFiniteLossError(RuntimeError):
    def __init__(self, report: "LossReport"):
        super().__init__(f"non-finite loss: {report.to_record()}")
        self.report = report


@dataclass
class LossReport:
    step: str
    iteration: int = 0
    lr: float = 0.0
    l_cls: Optional[float] = None
    l_loc: Optional[float] = None
    l_rpn: Optional[float] = None
    l_dom_src: Optional[float] = None
    l_dom_tgt: Optional[float] = None
    l_perp_src: Optional[float] = None
    l_perp_tgt: Optional[float] = None
    l_align_src: Optional[float] = None
    l_align_tgt: Optional[float] = None
    total: float = 0.0

    PARTS = ("l_cls", "l_loc", "l_rpn", "l_dom_src", "l_dom_tgt", "l_perp_src", "l_perp_tgt",
             "l_align_src", "l_align_tgt")

    def parts_sum(self) -> float:
        return sum(getattr(self, k) for k in self.PARTS if getattr(self, k) is not None)

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, k)) for k in self.PARTS + ("total",)
                   if getattr(self, k) is not None)

    def to_record(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}


@dataclass
class TorchSample:
    image: torch.Tensor  # 3 x H x W
    domain: int
    boxes: Optional[torch.Tensor] = None
    classes: Optional[torch.Tensor] = None

    @classmethod
    def from_sample(cls, sample: ImageSample) -> "TorchSample":
        image = torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1))).float()
        if sample.boxes is None:
            return cls(image, sample.domain)
        return cls(image, sample.domain, torch.as_tensor(sample.boxes, dtype=torch.float32),
                   torch.as_tensor(sample.class_ids, dtype=torch.long))


def _check_pair(src: TorchSample, tgt: TorchSample) -> None:
    if src.domain != 0 or src.boxes is None:
        raise ValueError("source sample must be domain 0 with annotations")
    if tgt.domain != 1 or tgt.boxes is not None:
        raise ValueError("target sample must be domain 1 without annotations")


def sampling_generator(seed: int, iteration: int, step: str) -> torch.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(iteration, _STEP_CODES[step]))
    return torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))


def compute_losses(model: Detector, src: TorchSample, tgt: Optional[TorchSample], *, use_dom: bool,
                   use_perp: bool, use_align: bool, literal: bool = False,
                   generator: Optional[torch.Generator] = None, frozen_trunk: bool = False):
    """Loss terms for one source/target pair as a dict of scalar tensors.

    ``frozen_trunk`` evaluates the backbone without autograd.
    """
    images = src.image[None] if tgt is None else torch.stack([src.image, tgt.image])
    if frozen_trunk:
        with torch.no_grad():
            f_b = model.backbone(images)
        if model.is_vdd:
            f_di = model.dir_extractor(f_b)
            f_ds = difference_decompose(f_b, f_di)
        else:
            f_di, f_ds = f_b, torch.zeros_like(f_b)
    else:
        b = model.features(images)
        f_b, f_di, f_ds = b.f_b, b.f_di, b.f_ds
    head_in = f_di if model.is_vdd else f_b

    terms: dict[str, torch.Tensor] = {}
    # source detection
    proposals, l_rpn = model.rpn(head_in[0], model.anchors, model.image_size, src.boxes, generator, True)
    det_props = torch.cat([proposals, src.boxes.to(proposals.dtype)])
    labels, reg_t = match_proposals(det_props, src.boxes, src.classes)
    logits, deltas = model.roi_head(roi_align(head_in[0], det_props))
    terms.update({k: v for k, v in detection_loss(logits, deltas, labels, reg_t, l_rpn).items() if k != "l_det"})
    per_image = [("src", 0, proposals)]
    if tgt is not None:
        tgt_props, _ = model.rpn(head_in[1], model.anchors, model.image_size)
        per_image.append(("tgt", 1, tgt_props))
    for tag, i, props in per_image:
        if use_dom and model.is_vdd:
            pred = DomainPrediction(model.domain_classifier(f_ds[i:i + 1]), i)
            terms[f"l_dom_{tag}"] = domain_loss(pred)
        if use_align and model.has_base_aligner:
            aligned = f_di if model.align_on == "f_di" else f_b
            terms[f"l_align_{tag}"] = model.base_aligner(aligned[i:i + 1], i)
        # images without proposals skip the orthogonal term
        if use_perp and model.is_vdd and len(props):
            pair = PooledPair.from_features(f_di[i], f_ds[i], props)
            terms[f"l_perp_{tag}"] = orthogonal_loss(pair.p_di, pair.p_ds, literal=literal)
    return terms


class Trainer:
    def __init__(self, cfg: RunConfig, model: Optional[Detector] = None):
        self.cfg = cfg.validate()
        if model is None:
            torch.manual_seed(cfg.seed)
            model = Detector.from_config(cfg.to_dict())
        self.model = model
        groups = parameter_groups(model)
        sgd = dict(lr=cfg.lr_phase1, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
        self.opt1 = torch.optim.SGD([p for g in STEP1_GROUPS for p in groups[g].values()], **sgd)
        step2 = [p for g in STEP2_GROUPS for p in groups[g].values()]
        self.opt2 = torch.optim.SGD(step2, **sgd) if step2 else None

    def _set_lr(self, lr: float) -> None:
        for opt in (self.opt1, self.opt2):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    def _apply(self, step: str, terms: dict, optimizer, iteration: int, lr: float) -> LossReport:
        total = sum(terms.values())
        report = LossReport(step=step, iteration=iteration, lr=lr, total=total.item(),
                            **{k: v.item() for k, v in terms.items()})
        if not report.is_finite():
            raise NonFiniteLossError(report)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        set_trainable(self.model, STEP1_GROUPS)
        return report

    def step_decomposition(self, src: TorchSample, tgt: TorchSample, iteration: int = 0) -> LossReport:
        _check_pair(src, tgt)
        lr = self.cfg.lr_at(iteration)
        self._set_lr(lr)
        set_trainable(self.model, STEP1_GROUPS)
        vdd = self.model.is_vdd
        terms = compute_losses(self.model, src, tgt if vdd else None, use_dom=vdd, use_perp=False,
                               use_align=vdd, generator=sampling_generator(self.cfg.seed, iteration, "decomposition"))
        return self._apply("decomposition", terms, self.opt1, iteration, lr)

    def step_orthogonalization(self, src: TorchSample, tgt: TorchSample, iteration: int = 0) -> LossReport:
        _check_pair(src, tgt)
        if not self.model.is_vdd:
            raise RuntimeError("the source-only baseline has no orthogonalization step")
        lr = self.cfg.lr_at(iteration)
        self._set_lr(lr)
        set_trainable(self.model, STEP2_GROUPS)
        terms = compute_losses(self.model, src, tgt, use_dom=True, use_perp=self.cfg.use_ortho, use_align=False,
                               literal=self.cfg.eq6_literal, frozen_trunk=True,
                               generator=sampling_generator(self.cfg.seed, iteration, "orthogonalization"))
        return self._apply("orthogonalization", terms, self.opt2, iteration, lr)

    def step_joint(self, src: TorchSample, tgt: TorchSample, iteration: int = 0) -> LossReport:
        """Single update of every group on the summed objective (one-step ablation)."""
        _check_pair(src, tgt)
        lr = self.cfg.lr_at(iteration)
        self._set_lr(lr)
        set_trainable(self.model, STEP1_GROUPS)
        terms = compute_losses(self.model, src, tgt, use_dom=True, use_perp=self.cfg.use_ortho, use_align=True,
                               literal=self.cfg.eq6_literal, generator=sampling_generator(self.cfg.seed, iteration, "joint"))
        return self._apply("joint", terms, self.opt1, iteration, lr)

    def steps_for(self, iteration: int) -> list[str]:
        if not self.model.is_vdd:
            return ["decomposition"]
        if self.cfg.one_step:
            return ["joint"]
        if self.cfg.schedule == "blockwise":
            block = (iteration // self.cfg.block_size) % 2
            return ["decomposition"] if block == 0 else ["orthogonalization"]
        return ["decomposition", "orthogonalization"]

    def run_iteration(self, src: TorchSample, tgt: TorchSample, iteration: int) -> list[LossReport]:
        dispatch = {"decomposition": self.step_decomposition, "orthogonalization": self.step_orthogonalization,
                    "joint": self.step_joint}
        return [dispatch[s](src, tgt, iteration) for s in self.steps_for(iteration)]

    # ------------------------------------------------------------ persistence

    def optimizer_state(self) -> dict[str, dict[str, torch.Tensor]]:
        names = {id(p): n for n, p in self.model.named_parameters()}
        state = {}
        for key, opt in (("opt1", self.opt1), ("opt2", self.opt2)):
            if opt is None:
                continue
            state[key] = {names[id(p)]: s["momentum_buffer"] for p, s in opt.state.items()
                          if s.get("momentum_buffer") is not None}
        return state

    def load_optimizer_state(self, optim: dict[str, dict[str, np.ndarray]]) -> None:
        params = dict(self.model.named_parameters())
        for key, opt in (("opt1", self.opt1), ("opt2", self.opt2)):
            for name, buf in optim.get(key, {}).items():
                opt.state[params[name]]["momentum_buffer"] = torch.from_numpy(buf).clone()

    def save(self, path, iteration: int) -> Path:
        return save_checkpoint(path, self.model, self.cfg.config_hash(),
                               {"iteration": iteration, "config": self.cfg.to_dict()}, self.optimizer_state())


# ------------------------------------------------------------------ data

class SplitData:
    """Images of one split held in memory as uint8 tensors."""

    def __init__(self, corpus_dir, split: str, with_boxes: bool):
        corpus_dir = Path(corpus_dir)
        manifest = load_manifest(corpus_dir)
        if split not in manifest["splits"]:
            raise KeyError(f"split {split!r} not in corpus")
        entry = manifest["splits"][split]
        self.domain = entry["domain"]
        self.records = read_jsonl(corpus_dir / entry["annotations"])
        self.images = [torch.from_numpy((load_image(corpus_dir / r["file"]) * 255).round().astype(np.uint8))
                       for r in self.records]
        self.with_boxes = with_boxes

    def __len__(self):
        return len(self.records)

    def sample(self, index: int) -> TorchSample:
        image = self.images[index].permute(2, 0, 1).float() / 255.0
        rec = self.records[index]
        if self.with_boxes:
            return TorchSample(image, 0, torch.tensor(rec["boxes"], dtype=torch.float32).reshape(-1, 4),
                               torch.tensor(rec["classes"], dtype=torch.long))
        return TorchSample(image, 1)


def epoch_index(seed: int, stream: int, iteration: int, n: int) -> int:
    epoch, pos = divmod(iteration, n)
    return int(np.random.default_rng([seed, stream, epoch]).permutation(n)[pos])


def train(cfg: RunConfig, corpus_dir, out_dir, resume=None) -> Path:
    """Run the full schedule; returns the final checkpoint path.

    Writes ``loss_log.jsonl``, ``checkpoint_init.npz``,
    ``checkpoints/ckpt_NNNNNN.npz`` and ``checkpoint_final.npz`` under ``out_dir``.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(corpus_dir)
    target = cfg.target or manifest["config"]["targets"][0]
    src_split, tgt_split = "source_train", f"{target}_target_train"
    if src_split not in manifest["splits"] or tgt_split not in manifest["splits"]:
        raise ValueError(f"corpus lacks {src_split!r} or {tgt_split!r}")
    source = SplitData(corpus_dir, src_split, with_boxes=True)
    tgt_data = SplitData(corpus_dir, tgt_split, with_boxes=False)
    if len(source) == 0 or len(tgt_data) == 0:
        raise ValueError("corpus is missing a domain")

    trainer = Trainer(cfg)
    start = 0
    log_path = out / "loss_log.jsonl"
    if resume is not None:
        header, params, optim = read_checkpoint(resume)
        load_into(trainer.model, params)
        trainer.load_optimizer_state(optim)
        start = int(header["iteration"])
    else:
        trainer.save(out / "checkpoint_init.npz", 0)
        log_path.write_text("")

    with open(log_path, "a") as log_file:
        for it in range(start, cfg.total_iterations):
            src = source.sample(epoch_index(cfg.seed, 1, it, len(source)))
            tgt = tgt_data.sample(epoch_index(cfg.seed, 2, it, len(tgt_data)))
            try:
                reports = trainer.run_iteration(src, tgt, it)
            except NonFiniteLossError as exc:
                log_file.write(json.dumps(exc.report.to_record(), sort_keys=True) + "\n")
                raise
            for rep in reports:
                log_file.write(json.dumps(rep.to_record(), sort_keys=True) + "\n")
            done = it + 1
            if done % cfg.checkpoint_every == 0:
                trainer.save(out / "checkpoints" / f"ckpt_{done:06d}.npz", done)
            if done % 100 == 0:
                log.info("iter %d %s", done, " ".join(f"{r.step}={r.total:.4f}" for r in reports))
    return trainer.save(out / "checkpoint_final.npz", cfg.total_iterations)


def model_from_checkpoint(path) -> Detector:
    header, params, _ = read_checkpoint(path)
    cfg = dict(header.get("config", {}))
    cfg.setdefault("method", header.get("method") or "vdd")
    model = Detector.from_config(cfg)
    load_into(model, params)
    model.eval()
    return model
