import copy
import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from vdd_daod.config import RunConfig
from vdd_daod.detection.layers import match_proposals, smooth_l1
from vdd_daod.detection.model import (
    GROUP_NAMES,
    Detector,
    group_hash,
    parameter_groups,
    read_checkpoint,
    restore,
    set_trainable,
    snapshot,
)
from vdd_daod.detection.roi_align import roi_align
from vdd_daod.synth import CorpusConfig, DomainShift, SceneSpec, apply_domain_shift, build_corpus, generate_scene
from vdd_daod.trainer import (
    STEP2_GROUPS,
    NonFiniteLossError,
    TorchSample,
    Trainer,
    epoch_index,
    sampling_generator,
    train,
)

SIZE = 64


def small_cfg(**kw):
    base = dict(image_size=SIZE, n_source_train=6, n_target_train=4, n_target_eval=3,
                iterations_phase1=6, iterations_phase2=4, checkpoint_every=5)
    base.update(kw)
    return RunConfig(**base)


def pair(seed=1):
    src = generate_scene(SceneSpec(seed, SIZE, 2))
    tgt = apply_domain_shift(generate_scene(SceneSpec(seed + 100, SIZE, 2)), DomainShift("night", 0.8, seed))
    return TorchSample.from_sample(src), TorchSample.from_sample(tgt)


def groups_equal(a, b, group):
    return all(torch.equal(a[group][n], b[group][n]) for n in a[group])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    build_corpus(small_cfg().corpus_config(), root)
    return root


# independent recomputation of the per-step objectives, assembled from the
# primitive layers rather than from the trainer's loss routine
def bce_logit(z, label):
    p = torch.sigmoid(z.double())
    return -(label * torch.log(p) + (1 - label) * torch.log1p(-p)).item()


def cosine_term(f_di, f_ds, props):
    a = roi_align(f_di.double(), props).mean(dim=(2, 3))
    b = roi_align(f_ds.double(), props).mean(dim=(2, 3))
    cos = (a * b).sum(1) / (a.norm(dim=1).clamp_min(1e-8) * b.norm(dim=1).clamp_min(1e-8))
    return cos.abs().mean().item()


def recompute(model, src, tgt, step, seed, iteration):
    gen = sampling_generator(seed, iteration, step)
    with torch.no_grad():
        f_b = model.backbone(torch.stack([src.image, tgt.image]))
        f_di = model.dir_extractor(f_b)
        f_ds = f_b.double() - f_di.double()
        props, l_rpn = model.rpn(f_di[0], model.anchors, model.image_size, src.boxes, gen, True)
        det_props = torch.cat([props, src.boxes])
        labels, targets = match_proposals(det_props, src.boxes, src.classes)
        logits, deltas = model.roi_head(roi_align(f_di[0], det_props))
        l_cls = F.cross_entropy(logits.double(), labels).item()
        pos = torch.nonzero(labels > 0).flatten()
        l_loc = 0.0
        if len(pos):
            cols = torch.stack([4 * (labels[pos] - 1) + k for k in range(4)], 1)
            l_loc = smooth_l1(deltas[pos[:, None], cols].double() - targets[pos].double()).sum(1).mean().item()
        total = l_cls + l_loc + l_rpn.item()
        for i in (0, 1):
            total += bce_logit(model.domain_classifier(f_ds[i:i + 1]), i)
        if step == "decomposition":
            al = model.base_aligner
            seen = f_di if model.align_on == "f_di" else f_b
            for i in (0, 1):
                h = F.relu(F.conv2d(seen[i:i + 1], al.conv1.weight, al.conv1.bias))
                d = torch.sigmoid(F.conv2d(h, al.conv2.weight, al.conv2.bias)).double()
                total += 0.5 * ((d - i) ** 2).mean().item()
        else:
            tgt_props, _ = model.rpn(f_di[1], model.anchors, model.image_size)
            total += cosine_term(f_di[0], f_ds[0], props)
            if len(tgt_props):
                total += cosine_term(f_di[1], f_ds[1], tgt_props)
    return total


class TestGroups:
    def test_partition(self):
        model = Detector()
        groups = parameter_groups(model)
        seen = [id(p) for g in groups.values() for p in g.values()]
        assert len(seen) == len(set(seen)) == len(list(model.parameters()))
        assert set(groups) == set(GROUP_NAMES)
        assert all(groups[g] for g in GROUP_NAMES)

    def test_source_only_groups(self):
        groups = parameter_groups(Detector("source_only"))
        assert not groups["dir_extractor"] and not groups["domain_classifier"]

    def test_unassigned_parameter(self):
        model = Detector()
        model.stray = torch.nn.Parameter(torch.zeros(1))
        with pytest.raises(ValueError):
            parameter_groups(model)

    def test_snapshot_restore(self):
        model = Detector()
        snap = snapshot(model)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p))
        restore(model, snap)
        after = snapshot(model)
        assert all(groups_equal(snap, after, g) for g in GROUP_NAMES)

    def test_frozen_group_survives_step(self):
        model = Detector()
        before = group_hash(model, "backbone_E")
        set_trainable(model, [g for g in GROUP_NAMES if g != "backbone_E"])
        opt = torch.optim.SGD(model.parameters(), lr=0.1, momentum=0.9, weight_decay=5e-4)
        model.features(torch.rand(1, 3, 32, 32)).f_di.sum().backward()
        opt.step()
        assert group_hash(model, "backbone_E") == before


class TestSteps:
    def test_zero_lr_keeps_weights(self):
        trainer = Trainer(small_cfg(lr_phase1=0.0))
        src, tgt = pair()
        snap = snapshot(trainer.model)
        reports = trainer.run_iteration(src, tgt, 0)
        after = snapshot(trainer.model)
        assert all(groups_equal(snap, after, g) for g in GROUP_NAMES)
        assert [r.step for r in reports] == ["decomposition", "orthogonalization"]
        assert all(r.l_cls is not None and r.l_dom_src is not None for r in reports)

    def test_decomposition_moves_every_group(self):
        trainer = Trainer(small_cfg(lr_phase1=1e-2))
        src, tgt = pair()
        snap = snapshot(trainer.model)
        rep = trainer.step_decomposition(src, tgt, 0)
        after = snapshot(trainer.model)
        assert all(not groups_equal(snap, after, g) for g in GROUP_NAMES)
        assert rep.l_perp_src is None and rep.l_perp_tgt is None

    def test_orthogonalization_freeze(self):
        trainer = Trainer(small_cfg(lr_phase1=1e-2))
        src, tgt = pair()
        hashes = {g: group_hash(trainer.model, g) for g in GROUP_NAMES}
        rep = trainer.step_orthogonalization(src, tgt, 0)
        for g in GROUP_NAMES:
            changed = group_hash(trainer.model, g) != hashes[g]
            assert changed == (g in STEP2_GROUPS), g
        assert rep.l_perp_src is not None and rep.l_align_src is None

    @pytest.mark.parametrize("step", ["decomposition", "orthogonalization"])
    def test_reported_total_matches_recomputation(self, step):
        cfg = small_cfg()
        trainer = Trainer(cfg)
        src, tgt = pair(3)
        frozen = copy.deepcopy(trainer.model)
        rep = getattr(trainer, f"step_{step}")(src, tgt, 4)
        assert rep.total == pytest.approx(recompute(frozen, src, tgt, step, cfg.seed, 4), abs=1e-6)
        assert rep.total == pytest.approx(rep.parts_sum(), abs=1e-6)

    def test_joint_step_has_every_term(self):
        trainer = Trainer(small_cfg(one_step=True))
        src, tgt = pair()
        (rep,) = trainer.run_iteration(src, tgt, 0)
        assert rep.step == "joint"
        assert None not in (rep.l_perp_src, rep.l_dom_tgt, rep.l_align_src)

    def test_no_ortho_drops_perp(self):
        trainer = Trainer(small_cfg(use_ortho=False))
        src, tgt = pair()
        assert trainer.step_orthogonalization(src, tgt, 0).l_perp_src is None

    def test_blockwise_schedule(self):
        trainer = Trainer(small_cfg(schedule="blockwise", block_size=2))
        assert [trainer.steps_for(i) for i in range(5)] == [
            ["decomposition"], ["decomposition"], ["orthogonalization"], ["orthogonalization"], ["decomposition"]]

    def test_source_only(self):
        trainer = Trainer(small_cfg(method="source_only"))
        src, tgt = pair()
        (rep,) = trainer.run_iteration(src, tgt, 0)
        assert rep.l_dom_src is None
        with pytest.raises(RuntimeError):
            trainer.step_orthogonalization(src, tgt, 0)

    def test_rejects_swapped_domains(self):
        trainer = Trainer(small_cfg())
        src, tgt = pair()
        with pytest.raises(ValueError):
            trainer.step_decomposition(tgt, src)
        with pytest.raises(ValueError):
            trainer.step_orthogonalization(src, src)

    def test_non_finite_loss(self):
        trainer = Trainer(small_cfg())
        with torch.no_grad():
            trainer.model.roi_head.cls_score.bias.fill_(float("nan"))
        src, tgt = pair()
        with pytest.raises(NonFiniteLossError) as info:
            trainer.step_decomposition(src, tgt)
        assert not info.value.report.is_finite()


class TestTrain:
    def test_zero_lr_final_equals_init(self, corpus, tmp_path):
        final = train(small_cfg(lr_phase1=0.0), corpus, tmp_path)
        _, p_final, _ = read_checkpoint(final)
        _, p_init, _ = read_checkpoint(tmp_path / "checkpoint_init.npz")
        for g in p_init:
            for n in p_init[g]:
                assert np.array_equal(p_init[g][n], p_final[g][n])

    def test_log_structure(self, corpus, tmp_path):
        cfg = small_cfg()
        train(cfg, corpus, tmp_path)
        recs = [json.loads(line) for line in (tmp_path / "loss_log.jsonl").read_text().splitlines()]
        for it in range(cfg.total_iterations):
            steps = sorted(r["step"] for r in recs if r["iteration"] == it)
            assert steps == ["decomposition", "orthogonalization"]
        assert all(abs(r["total"] - sum(v for k, v in r.items() if k.startswith("l_"))) < 1e-6 for r in recs)
        assert all(r["lr"] == pytest.approx(1e-4 if r["iteration"] >= 6 else 1e-3) for r in recs)
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["ckpt_000005.npz", "ckpt_000010.npz"]

    def test_deterministic(self, corpus, tmp_path):
        a = train(small_cfg(), corpus, tmp_path / "a")
        b = train(small_cfg(), corpus, tmp_path / "b")
        assert (tmp_path / "a" / "loss_log.jsonl").read_bytes() == (tmp_path / "b" / "loss_log.jsonl").read_bytes()
        assert a.read_bytes() == b.read_bytes()

    def test_resume_matches_uninterrupted(self, corpus, tmp_path):
        full = train(small_cfg(), corpus, tmp_path / "full")
        resumed = train(small_cfg(), corpus, tmp_path / "resumed",
                        resume=tmp_path / "full" / "checkpoints" / "ckpt_000005.npz")
        assert full.read_bytes() == resumed.read_bytes()
        tail = [line for line in (tmp_path / "full" / "loss_log.jsonl").read_text().splitlines()
                if json.loads(line)["iteration"] >= 5]
        assert (tmp_path / "resumed" / "loss_log.jsonl").read_text().splitlines() == tail

    def test_missing_domain(self, tmp_path):
        build_corpus(CorpusConfig(image_size=SIZE, n_source_train=2, n_target_train=2, n_target_eval=2), tmp_path)
        with pytest.raises(ValueError):
            train(small_cfg(target="fog"), tmp_path, tmp_path / "out")


def test_epoch_index_is_permutation():
    picks = [epoch_index(3, 1, it, 7) for it in range(14)]
    assert sorted(picks[:7]) == list(range(7)) and sorted(picks[7:]) == list(range(7))
    assert picks == [epoch_index(3, 1, it, 7) for it in range(14)]
