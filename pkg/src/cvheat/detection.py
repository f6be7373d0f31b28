"""Set-prediction detection head with IoU-aware query selection, its loss and a
COCO-style mAP evaluator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import Tensor, nn

PROB_EPS = 1e-7
COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
_IOU_MATCH_EPS = 1e-12


# --------------------------------------------------------------------------- boxes


@dataclass(frozen=True)
class Box:
    """Normalised centre/size box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box width and height must be positive")

    def corners(self) -> Tuple[float, float, float, float]:
        """``(x1, y1, x2, y2)`` clipped to the unit square."""
        x1, y1, x2, y2 = self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2
        return tuple(float(np.clip(v, 0.0, 1.0)) for v in (x1, y1, x2, y2))

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_area(b):
    return (b[..., 2] - b[..., 0]).clip(min=0) * (b[..., 3] - b[..., 1]).clip(min=0)


def box_iou(a, b):
    """Pairwise IoU of corner boxes ``(n, 4)`` x ``(m, 4)`` (numpy or torch)."""
    lt_x = np.maximum if isinstance(a, np.ndarray) else torch.maximum
    rb_x = np.minimum if isinstance(a, np.ndarray) else torch.minimum
    a_, b_ = a[:, None, :], b[None, :, :]
    iw = (rb_x(a_[..., 2], b_[..., 2]) - lt_x(a_[..., 0], b_[..., 0])).clip(min=0)
    ih = (rb_x(a_[..., 3], b_[..., 3]) - lt_x(a_[..., 1], b_[..., 1])).clip(min=0)
    inter = iw * ih
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return inter / union.clip(min=1e-12)


def iou(a: Union[Box, Sequence[float]], b: Union[Box, Sequence[float]]) -> float:
    """IoU of two boxes, given as :class:`Box` or as corner tuples ``(x1, y1, x2, y2)``."""
    ca = np.asarray(a.corners() if isinstance(a, Box) else a, dtype=np.float64)[None]
    cb = np.asarray(b.corners() if isinstance(b, Box) else b, dtype=np.float64)[None]
    return float(box_iou(ca, cb)[0, 0])


# --------------------------------------------------------------------------- matching


def hungarian_match(cost) -> List[Tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` pairs, sorted by row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0
    alpha: float = 0.75
    gamma: float = 2.0


def match_cost_matrix(logits: Tensor, boxes: Tensor, gt_labels: Tensor, gt_boxes: Tensor, w: LossWeights) -> Tensor:
    """``(n_pred, n_gt)`` costs: ``-cls*sigmoid + l1*|b - b_gt|_1 + iou*(1 - IoU)``."""
    prob = logits.sigmoid()[:, gt_labels]
    l1 = torch.cdist(boxes, gt_boxes, p=1)
    ious = box_iou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_boxes))
    return -w.cls * prob + w.l1 * l1 + w.iou * (1 - ious)


def match_cost(logits, box: Box, gt_class: int, gt_box: Box, lam_cls: float, lam_l1: float, lam_iou: float) -> float:
    """Cost of assigning one prediction to one ground-truth object."""
    logits = torch.as_tensor(logits, dtype=torch.float64).reshape(1, -1)
    pb = torch.tensor([[box.cx, box.cy, box.w, box.h]], dtype=torch.float64)
    gb = torch.tensor([[gt_box.cx, gt_box.cy, gt_box.w, gt_box.h]], dtype=torch.float64)
    w = LossWeights(lam_cls, lam_l1, lam_iou)
    return float(match_cost_matrix(logits, pb, torch.tensor([gt_class]), gb, w)[0, 0])


# --------------------------------------------------------------------------- losses


def vfl_loss(p, q, positive, alpha: float = 0.75, gamma: float = 2.0):
    """Varifocal loss, elementwise.

    Positives: ``-q * (q log p + (1 - q) log(1 - p))``; negatives:
    ``-alpha * p**gamma * log(1 - p)``. ``p`` is clamped to ``[1e-7, 1 - 1e-7]``.
    Accepts floats or tensors.
    """
    scalar = not isinstance(p, Tensor)
    p = torch.as_tensor(p, dtype=torch.float64 if scalar else None)
    q = torch.as_tensor(q, dtype=p.dtype)
    positive = torch.as_tensor(positive, dtype=torch.bool)
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = -q * (q * torch.log(p) + (1 - q) * torch.log1p(-p))
    neg = -alpha * p.pow(gamma) * torch.log1p(-p)
    out = torch.where(positive, pos, neg)
    return float(out) if scalar else out


def detect_loss(
    logits: Tensor,
    boxes: Tensor,
    gt_labels: Tensor,
    gt_boxes: Tensor,
    weights: Optional[LossWeights] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """Hungarian-matched box loss plus IoU-targeted varifocal classification loss.

    Args:
        logits: ``(n, num_classes)`` class logits.
        boxes: ``(n, 4)`` predicted ``cx, cy, w, h`` in ``[0, 1]``.
        gt_labels: ``(m,)`` class ids.
        gt_boxes: ``(m, 4)`` ground-truth ``cx, cy, w, h``.

    Returns:
        Total loss (normalised by ``max(1, m)``) and a float breakdown.
    """
    w = weights or LossWeights()
    n, num_classes = logits.shape
    m = len(gt_labels)
    pairs = []
    if m and n:
        with torch.no_grad():
            cost = match_cost_matrix(logits.float(), boxes.float(), gt_labels, gt_boxes.float(), w)
        pairs = hungarian_match(cost.cpu().numpy())

    target = torch.zeros_like(logits)
    positive = torch.zeros_like(logits, dtype=torch.bool)
    l1 = iou_term = logits.new_zeros(())
    mean_iou = 0.0
    if pairs:
        pi = torch.tensor([p for p, _ in pairs])
        gi = torch.tensor([g for _, g in pairs])
        pb, gb = boxes[pi], gt_boxes[gi]
        ious = box_iou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gb)).diagonal()
        l1 = (pb - gb).abs().sum()
        iou_term = (1 - ious).sum()
        target[pi, gt_labels[gi]] = ious.detach().to(target.dtype)
        positive[pi, gt_labels[gi]] = True
        mean_iou = float(ious.detach().mean())
    cls = vfl_loss(logits.sigmoid(), target, positive, w.alpha, w.gamma).sum()
    norm = max(1, m)
    box = (w.l1 * l1 + w.iou * iou_term) / norm
    cls = cls / norm
    total = box + cls
    parts = {"total": float(total.detach()), "box": float(box.detach()), "cls": float(cls.detach()), "mean_iou": mean_iou}
    return total, parts


# --------------------------------------------------------------------------- head


class QuerySet(NamedTuple):
    indices: Tensor
    features: Tensor
    scores: Tensor


def select_queries(tokens: Tensor, class_head: nn.Module, k: int) -> QuerySet:
    """Top-``k`` of ``(N, d)`` tokens by max class probability; ties go to the lower index."""
    if k > tokens.shape[0]:
        raise ValueError(f"cannot select {k} queries from {tokens.shape[0]} tokens")
    scores = class_head(tokens).sigmoid().max(dim=-1).values
    return _top_k(tokens, scores, k)


def _top_k(tokens: Tensor, scores: Tensor, k: int) -> QuerySet:
    order = torch.sort(scores.detach(), descending=True, stable=True).indices[:k]
    return QuerySet(order, tokens[order], scores[order])


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class DetectionHead(nn.Module):
    """Per-token detector on the last backbone stage.

    A linear selection head scores every token; the ``num_queries`` best tokens
    go through a 3-layer MLP giving class logits and box offsets relative to the
    token's grid-cell anchor. The box MLP also runs on all tokens so the
    selection scores can be trained against IoU.
    """

    def __init__(self, dim: int, num_classes: int, num_queries: int = 100, anchor_scale: float = 2.0):
        super().__init__()
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.anchor_scale = anchor_scale
        self.class_head = nn.Linear(dim, num_classes)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, num_classes + 4)
        )

    def anchors(self, gh: int, gw: int, dtype=torch.float32) -> Tensor:
        ys, xs = torch.meshgrid(torch.arange(gh, dtype=dtype), torch.arange(gw, dtype=dtype), indexing="ij")
        cx = (xs.reshape(-1) + 0.5) / gw
        cy = (ys.reshape(-1) + 0.5) / gh
        w = torch.full_like(cx, min(self.anchor_scale / gw, 0.99))
        h = torch.full_like(cy, min(self.anchor_scale / gh, 0.99))
        return torch.stack([cx, cy, w, h], dim=-1)

    def forward(self, feat: Tensor) -> Dict[str, Tensor]:
        """``feat``: ``(B, C, H, W)`` last-stage map."""
        b, c, gh, gw = feat.shape
        tokens = feat.flatten(2).transpose(1, 2)
        if self.num_queries > gh * gw:
            raise ValueError(f"num_queries {self.num_queries} exceeds {gh * gw} tokens")
        enc_logits = self.class_head(tokens)
        out = self.mlp(tokens)
        logits = out[..., : self.num_classes]
        boxes = (inverse_sigmoid(self.anchors(gh, gw, feat.dtype)) + out[..., self.num_classes :]).sigmoid()
        scores = enc_logits.sigmoid().max(dim=-1).values
        sel = torch.stack([_top_k(tokens[i], scores[i], self.num_queries).indices for i in range(b)])
        gather = sel.unsqueeze(-1)
        return {
            "enc_logits": enc_logits,
            "all_logits": logits,
            "all_boxes": boxes,
            "selected": sel,
            "logits": logits.gather(1, gather.expand(-1, -1, self.num_classes)),
            "boxes": boxes.gather(1, gather.expand(-1, -1, 4)),
        }


# --------------------------------------------------------------------------- records and evaluation


class Detection(NamedTuple):
    image_id: int
    class_id: int
    score: float
    box: Tuple[float, float, float, float]


class GroundTruth(NamedTuple):
    image_id: int
    class_id: int
    box: Tuple[float, float, float, float]


def format_detections(dets: Iterable[Detection]) -> str:
    """One record per line: ``image_id class_id score x1 y1 x2 y2``."""
    return "".join(
        f"{d.image_id} {d.class_id} {d.score:.6f} " + " ".join(f"{v:.6f}" for v in d.box) + "\n" for d in dets
    )


def format_ground_truth(gts: Iterable[GroundTruth]) -> str:
    """One record per line: ``image_id class_id x1 y1 x2 y2``."""
    return "".join(f"{g.image_id} {g.class_id} " + " ".join(f"{v:.6f}" for v in g.box) + "\n" for g in gts)


def parse_detections(text: str, with_score: bool = True) -> list:
    """Parse detection records; ``with_score=False`` reads ground truth written
    in the same layout (the score column is ignored when present)."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) not in (6, 7):
            raise ValueError(f"line {lineno}: expected 6 or 7 fields, got {len(parts)}")
        image_id, class_id = int(parts[0]), int(parts[1])
        score = float(parts[2]) if len(parts) == 7 else 1.0
        box = tuple(float(v) for v in parts[-4:])
        out.append(Detection(image_id, class_id, score, box) if with_score else GroundTruth(image_id, class_id, box))
    return out


def _average_precision(tp: np.ndarray, npos: int) -> float:
    if npos == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    rec_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, rec_points, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def evaluate_map(
    preds: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> Dict[str, float]:
    """COCO-protocol mAP with 101-point interpolation.

    Classes without ground truth are left out of the average. Returns ``mAP``
    (mean over ``iou_thresholds``) plus ``mAP50``/``mAP75`` when those
    thresholds are evaluated.
    """
    classes = sorted({g.class_id for g in gts})
    thresholds = list(iou_thresholds)
    if not classes:
        return {"mAP": 0.0, "mAP50": 0.0, "mAP75": 0.0}
    ap = np.zeros((len(thresholds), len(classes)))
    for ci, c in enumerate(classes):
        gt_by_img: Dict[int, np.ndarray] = {}
        for g in gts:
            if g.class_id == c:
                gt_by_img.setdefault(g.image_id, []).append(g.box)
        gt_by_img = {k: np.asarray(v, dtype=np.float64) for k, v in gt_by_img.items()}
        npos = sum(len(v) for v in gt_by_img.values())
        cand = [p for p in preds if p.class_id == c]
        order = sorted(range(len(cand)), key=lambda i: -cand[i].score)
        cand = [cand[i] for i in order]
        ious = []
        for p in cand:
            boxes = gt_by_img.get(p.image_id)
            ious.append(box_iou(np.asarray([p.box], dtype=np.float64), boxes)[0] if boxes is not None else None)
        for ti, thr in enumerate(thresholds):
            used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_img.items()}
            tp = np.zeros(len(cand))
            for i, (p, row) in enumerate(zip(cand, ious)):
                if row is None:
                    continue
                free = np.where(used[p.image_id], -1.0, row)
                j = int(np.argmax(free))
                if free[j] >= thr - _IOU_MATCH_EPS:
                    used[p.image_id][j] = True
                    tp[i] = 1.0
            ap[ti, ci] = _average_precision(tp, npos)
    result = {"mAP": float(ap.mean())}
    for name, thr in (("mAP50", 0.5), ("mAP75", 0.75)):
        hits = [i for i, t in enumerate(thresholds) if abs(t - thr) < 1e-9]
        result[name] = float(ap[hits[0]].mean()) if hits else float("nan")
    return result
