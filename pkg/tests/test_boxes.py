import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vdd_daod.detection.boxes import (
    Box,
    box_iou,
    decode_deltas,
    encode_deltas,
    generate_anchors,
    iou,
    nms,
)


def brute_force_nms(boxes, scores, thresh):
    # repeatedly pick the best remaining box, drop everything overlapping it
    remaining = list(range(len(boxes)))
    keep = []
    while remaining:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best]:
                best = i
        keep.append(best)
        b = Box(*boxes[best])
        remaining = [i for i in remaining if i != best and iou(b, Box(*boxes[i])) <= thresh]
    return keep


def random_boxes(gen, n, scale=100.0):
    xy = torch.rand(n, 2, generator=gen, dtype=torch.float64) * scale
    wh = torch.rand(n, 2, generator=gen, dtype=torch.float64) * scale / 2 + 1
    return torch.cat([xy, xy + wh], dim=1)


class TestIoU:
    def test_identity(self):
        b = Box(3, 4, 10, 12)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_hand_value(self):
        # intersection 2, union 6
        assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_matrix_agrees_with_scalar(self):
        gen = torch.Generator().manual_seed(1)
        a, b = random_boxes(gen, 7), random_boxes(gen, 5)
        m = box_iou(a, b)
        for i in range(7):
            for j in range(5):
                assert m[i, j].item() == pytest.approx(iou(Box(*a[i].tolist()), Box(*b[j].tolist())), abs=1e-12)

    @given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a = Box(v[0], v[1], v[0] + v[2] + 0.5, v[1] + v[3] + 0.5)
        b = Box(v[4], v[5], v[4] + v[6] + 0.5, v[5] + v[7] + 0.5)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            Box(1, 1, 1, 2)


class TestDeltas:
    def test_identity(self):
        a = torch.tensor([[2.0, 3.0, 12.0, 20.0]])
        assert torch.equal(encode_deltas(a, a), torch.zeros(1, 4))

    def test_width_slot(self):
        d = encode_deltas(torch.tensor([0.0, 0, 10, 10]), torch.tensor([0.0, 0, 20, 10]))
        assert d[2].item() == pytest.approx(math.log(2))
        assert d[3].item() == 0.0

    def test_round_trip(self):
        gen = torch.Generator().manual_seed(0)
        anchors, targets = random_boxes(gen, 100), random_boxes(gen, 100)
        back = decode_deltas(anchors, encode_deltas(anchors, targets))
        assert (back - targets).abs().max().item() < 1e-5

    def test_degenerate_anchor(self):
        with pytest.raises(ValueError):
            encode_deltas(torch.tensor([0.0, 0, 0, 5]), torch.tensor([0.0, 0, 5, 5]))


class TestNMS:
    def test_single(self):
        assert nms(torch.tensor([[0.0, 0, 5, 5]]), torch.tensor([0.3])) == [0]

    def test_identical_pair(self):
        boxes = torch.tensor([[0.0, 0, 5, 5], [0.0, 0, 5, 5]])
        assert nms(boxes, torch.tensor([0.8, 0.9])) == [1]

    def test_ties_prefer_lower_index(self):
        boxes = torch.tensor([[0.0, 0, 5, 5], [0.0, 0, 5, 5]])
        assert nms(boxes, torch.tensor([0.5, 0.5])) == [0]

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force(self, seed):
        gen = torch.Generator().manual_seed(seed)
        boxes = random_boxes(gen, 50)
        scores = torch.rand(50, generator=gen, dtype=torch.float64)
        kept = nms(boxes, scores, 0.7)
        assert kept == brute_force_nms(boxes.tolist(), scores.tolist(), 0.7)
        ks = scores[kept]
        assert bool((ks[:-1] >= ks[1:]).all())
        m = box_iou(boxes[kept], boxes[kept]).fill_diagonal_(0)
        assert m.max().item() <= 0.7


class TestAnchors:
    def test_count(self):
        assert generate_anchors(16, 16).shape == (768, 4)

    def test_first_cell(self):
        a = generate_anchors(16, 16)[0]
        assert a.tolist() == [-4.0, -4.0, 12.0, 12.0]  # centre (4, 4), width 16

    def test_order_is_cell_then_size(self):
        a = generate_anchors(2, 2)
        widths = (a[:, 2] - a[:, 0]).tolist()
        assert widths == [16, 32, 64] * 4

    def test_translation_covariant(self):
        a = generate_anchors(4, 5).reshape(4, 5, 3, 4)
        shift = torch.tensor([0.0, 8.0, 0.0, 8.0])
        assert torch.equal(a[1:], a[:-1] + shift)
        assert torch.equal(a[:, 1:], a[:, :-1] + shift[[1, 0, 3, 2]])


@settings(max_examples=50)
@given(st.integers(1, 10), st.integers(1, 10))
def test_anchor_count_property(h, w):
    assert len(generate_anchors(h, w)) == h * w * 3
