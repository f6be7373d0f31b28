import itertools
import math

import numpy as np
import pytest
import torch
from torch import nn

from cvheat.detection import (
    Box,
    Detection,
    DetectionHead,
    GroundTruth,
    LossWeights,
    detect_loss,
    evaluate_map,
    format_detections,
    hungarian_match,
    iou,
    match_cost,
    parse_detections,
    select_queries,
    vfl_loss,
)


def brute_force_assignment(cost):
    """Minimum total over all injective row-to-column (or column-to-row) maps."""
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, c] for i, c in enumerate(cols)) for cols in itertools.permutations(range(m), n))
    return min(sum(cost[r, j] for j, r in enumerate(rows)) for rows in itertools.permutations(range(n), m))


# ---------------------------------------------------------------- IoU


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def test_iou_properties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = Box(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.5, 2))
        b = Box(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.5, 2))
        v = iou(a, b)
        assert 0.0 <= v <= 1.0 and v == iou(b, a)
        assert iou(a, a) == 1.0


def test_box_validation_and_corners():
    with pytest.raises(ValueError):
        Box(0.5, 0.5, 0.0, 0.1)
    assert Box(0.5, 0.5, 0.2, 0.4).corners() == pytest.approx((0.4, 0.3, 0.6, 0.7))
    b = Box.from_corners(0.1, 0.2, 0.3, 0.6)
    assert (b.cx, b.cy, b.w, b.h) == pytest.approx((0.2, 0.4, 0.2, 0.4))


# ---------------------------------------------------------------- Hungarian matching


def test_hungarian_examples():
    pairs = hungarian_match([[1, 2], [2, 4]])
    assert set(pairs) == {(0, 1), (1, 0)}
    assert hungarian_match(np.eye(3) * -5 + 1) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian_match([[5, 1, 9]]) == [(0, 1)]
    assert hungarian_match(np.zeros((0, 3))) == []


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian_match([[np.inf, 1.0]])


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n, m = rng.integers(1, 8, 2)
        cost = rng.normal(size=(n, m))
        pairs = hungarian_match(cost)
        assert len(pairs) == min(n, m)
        assert len({r for r, _ in pairs}) == len({c for _, c in pairs}) == len(pairs)
        total = sum(cost[r, c] for r, c in pairs)
        assert abs(total - brute_force_assignment(cost)) < 1e-9


# ---------------------------------------------------------------- costs and losses


def test_match_cost_examples():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    perfect = match_cost([30.0, -30.0], gt, 0, gt, 2.0, 5.0, 2.0)
    assert perfect == pytest.approx(-2.0, abs=1e-9)
    assert match_cost([0.3, 0.1], Box(0.2, 0.2, 0.1, 0.1), 1, gt, 0, 0, 0) == 0.0
    pure_iou = match_cost([0.0], Box(1, 1, 2, 2), 0, Box(2, 2, 2, 2), 0.0, 0.0, 3.0)
    assert pure_iou == pytest.approx(3.0 * 6 / 7, abs=1e-12)


def test_vfl_examples():
    assert vfl_loss(1.0, 1.0, True) == pytest.approx(0.0, abs=1e-6)
    assert vfl_loss(0.3, 0.0, True) == 0.0
    assert vfl_loss(1e-9, 0.0, False) < 1e-12
    q = 0.7
    p = 0.4
    expected = -q * (q * math.log(p) + (1 - q) * math.log(1 - p))
    assert vfl_loss(p, q, True) == pytest.approx(expected, rel=1e-12)
    assert vfl_loss(p, 0.0, False, alpha=0.75, gamma=2.0) == pytest.approx(-0.75 * p**2 * math.log(1 - p), rel=1e-12)


def test_vfl_finite_at_extremes():
    p = torch.tensor([0.0, 1.0, 0.5])
    for positive in (True, False):
        assert torch.isfinite(vfl_loss(p, torch.ones(3), torch.full((3,), positive))).all()


def test_detect_loss_empty_targets():
    logits = torch.full((5, 3), -30.0)
    total, parts = detect_loss(logits, torch.rand(5, 4) * 0.5 + 0.25, torch.zeros(0, dtype=torch.long), torch.zeros(0, 4))
    assert total.item() < 1e-6 and parts["box"] == 0.0


def test_detect_loss_perfect_prediction():
    gt = torch.tensor([[0.3, 0.4, 0.2, 0.2]])
    logits = torch.full((4, 3), -30.0)
    logits[2, 1] = 30.0
    boxes = torch.tensor([[0.8, 0.8, 0.1, 0.1], [0.1, 0.1, 0.1, 0.1], [0.3, 0.4, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]])
    total, parts = detect_loss(logits, boxes, torch.tensor([1]), gt)
    assert total.item() < 1e-5 and parts["mean_iou"] == pytest.approx(1.0)


def test_detect_loss_box_term_on_one_seventh_pair():
    w = LossWeights(cls=0.0, l1=0.0, iou=1.0)
    _, parts = detect_loss(torch.zeros(1, 1), torch.tensor([[1.0, 1.0, 2.0, 2.0]]), torch.tensor([0]), torch.tensor([[2.0, 2.0, 2.0, 2.0]]), w)
    assert parts["box"] == pytest.approx(6 / 7, abs=1e-6)


def test_detect_loss_finite_and_non_negative():
    rng = torch.Generator().manual_seed(0)
    for _ in range(20):
        logits = torch.randn(6, 3, generator=rng) * 50
        boxes = torch.rand(6, 4, generator=rng) * 0.5 + 0.1
        m = int(torch.randint(0, 4, (1,), generator=rng))
        total, _ = detect_loss(logits, boxes, torch.randint(0, 3, (m,), generator=rng), torch.rand(m, 4, generator=rng) * 0.5 + 0.1)
        assert torch.isfinite(total) and total.item() >= 0


def test_detect_loss_gradients_flow():
    logits = torch.zeros(3, 2, requires_grad=True)
    boxes = torch.full((3, 4), 0.3, requires_grad=True)
    total, _ = detect_loss(logits, boxes, torch.tensor([0]), torch.tensor([[0.5, 0.5, 0.2, 0.2]]))
    total.backward()
    assert logits.grad.abs().sum() > 0 and boxes.grad.abs().sum() > 0


# ---------------------------------------------------------------- query selection


def _score_tokens(scores):
    p = torch.tensor(scores)
    return torch.log(p / (1 - p)).unsqueeze(1)


def test_select_queries_examples():
    head = nn.Identity()
    assert sorted(select_queries(_score_tokens([0.9, 0.2, 0.5]), head, 2).indices.tolist()) == [0, 2]
    assert sorted(select_queries(_score_tokens([0.9, 0.2, 0.5]), head, 3).indices.tolist()) == [0, 1, 2]
    assert select_queries(_score_tokens([0.5, 0.5]), head, 1).indices.tolist() == [0]
    with pytest.raises(ValueError):
        select_queries(_score_tokens([0.5]), head, 2)


def test_select_queries_rank_invariance():
    torch.manual_seed(0)
    tokens = torch.randn(20, 1)
    head = nn.Identity()
    a = select_queries(tokens, head, 5).indices
    b = select_queries(tokens * 3.7, head, 5).indices
    assert torch.equal(a, b)


def test_detection_head_shapes():
    torch.manual_seed(0)
    head = DetectionHead(16, 3, num_queries=5)
    out = head(torch.randn(2, 16, 4, 4))
    assert out["logits"].shape == (2, 5, 3) and out["boxes"].shape == (2, 5, 4)
    assert out["enc_logits"].shape == (2, 16, 3) and out["all_boxes"].shape == (2, 16, 4)
    assert ((out["boxes"] > 0) & (out["boxes"] < 1)).all()
    with pytest.raises(ValueError):
        DetectionHead(16, 3, num_queries=17)(torch.randn(1, 16, 4, 4))


# ---------------------------------------------------------------- evaluation


def test_map_perfect_detector():
    gts = [GroundTruth(0, 1, (0.1, 0.1, 0.4, 0.5))]
    res = evaluate_map([Detection(0, 1, 0.9, (0.1, 0.1, 0.4, 0.5))], gts)
    assert res == {"mAP": 1.0, "mAP50": 1.0, "mAP75": 1.0}


def test_map_no_predictions():
    assert evaluate_map([], [GroundTruth(0, 0, (0, 0, 1, 1))])["mAP"] == 0.0


def test_map_single_prediction_iou_point_six():
    gts = [GroundTruth(0, 0, (0.0, 0.0, 1.0, 1.0))]
    preds = [Detection(0, 0, 0.8, (0.0, 0.0, 0.6, 1.0))]
    assert iou(preds[0].box, gts[0].box) == 0.6
    res = evaluate_map(preds, gts)
    # hits at thresholds 0.50, 0.55 and 0.60 out of ten
    assert res["mAP50"] == 1.0 and res["mAP75"] == 0.0 and res["mAP"] == pytest.approx(0.3, abs=1e-12)


def test_map_two_classes_hand_case():
    gts = [GroundTruth(0, 0, (0, 0, 0.5, 0.5)), GroundTruth(0, 1, (0.5, 0.5, 1, 1)), GroundTruth(1, 1, (0, 0, 0.5, 0.5))]
    preds = [
        Detection(0, 0, 0.9, (0, 0, 0.5, 0.5)),
        Detection(0, 1, 0.8, (0, 0, 0.2, 0.2)),  # false positive ranked first for class 1
        Detection(1, 1, 0.7, (0, 0, 0.5, 0.5)),
    ]
    # class 1: FP then TP, recall 1/2 at precision 1/2, no second hit -> 51 of 101 points at 0.5
    res = evaluate_map(preds, gts)
    assert res["mAP50"] == pytest.approx((1.0 + 51 * 0.5 / 101) / 2, abs=1e-12)


def test_map_duplicates_never_help():
    rng = np.random.default_rng(4)
    for _ in range(50):
        gts, preds = [], []
        for img in range(3):
            for _ in range(rng.integers(1, 3)):
                x, y = rng.uniform(0, 0.6, 2)
                gts.append(GroundTruth(img, int(rng.integers(2)), (x, y, x + 0.3, y + 0.3)))
        for g in gts:
            j = rng.uniform(-0.05, 0.05, 4)
            preds.append(Detection(g.image_id, g.class_id, float(rng.uniform()), tuple(np.add(g.box, j))))
        base = evaluate_map(preds, gts)
        d = preds[int(rng.integers(len(preds)))]
        dup = evaluate_map(preds + [Detection(d.image_id, d.class_id, d.score * 0.999, d.box)], gts)
        assert 0.0 <= base["mAP"] <= 1.0
        assert dup["mAP"] <= base["mAP"] + 1e-12


def test_detection_file_roundtrip():
    dets = [Detection(3, 1, 0.25, (0.1, 0.2, 0.3, 0.4)), Detection(0, 2, 1.0, (0.0, 0.0, 1.0, 1.0))]
    text = format_detections(dets)
    assert text.splitlines()[0] == "3 1 0.250000 0.100000 0.200000 0.300000 0.400000"
    assert parse_detections(text) == dets
    gts = parse_detections("0 1 0.1 0.2 0.3 0.4\n", with_score=False)
    assert gts == [GroundTruth(0, 1, (0.1, 0.2, 0.3, 0.4))]
