"""End-to-end orchestration: encode -> graphs -> backbone -> detect -> evaluate, and training."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from cvheat.config import PipelineConfig, serialize_config
from cvheat.detection import (
    DetectionHead,
    Detection,
    GroundTruth,
    cxcywh_to_xyxy,
    detect_loss,
    evaluate_map,
    format_detections,
)
from cvheat.events import EventSlice, EventTensor, encode_frame, encode_voxel, slice_stream
from cvheat.graphs import GraphBundle, build_bundle
from cvheat.heat import Backbone
from cvheat.nn import load_checkpoint, save_checkpoint
from cvheat.synthetic import scene_stream

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Sample:
    image_id: int
    frame: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    """``(m, 4)`` normalised ``cx, cy, w, h``."""
    bundle: GraphBundle
    flipped: Optional["Sample"] = None


def synthetic_splits(cfg: PipelineConfig) -> Tuple[List[Sample], List[Sample]]:
    """Training (with flipped copies) and validation samples from seeded synthetic streams.

    The two streams use seeds ``cfg.seed + 1`` and ``cfg.seed + 2``.
    """
    def stream(n, seed):
        return scene_stream(
            n, cfg.resolution, cfg.slice_interval, seed, cfg.max_objects, cfg.noise_rate, cfg.contour_density
        )

    train_samples = prepare_samples(cfg, *stream(cfg.train_scenes, cfg.seed + 1), with_flip=cfg.hflip)
    val_samples = prepare_samples(cfg, *stream(cfg.val_scenes, cfg.seed + 2))
    return train_samples, val_samples


def encode_slice(cfg: PipelineConfig, sl: EventSlice) -> EventTensor:
    if cfg.encoding == "frame":
        return encode_frame(sl, cfg.resolution, cfg.resolution)
    return encode_voxel(sl, cfg.resolution, cfg.resolution, cfg.voxel_bins)


def _gt_arrays(gts: Sequence[GroundTruth]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.array([g.class_id for g in gts], dtype=np.int64)
    if not gts:
        return labels, np.zeros((0, 4), dtype=np.float32)
    c = np.array([g.box for g in gts], dtype=np.float32)
    boxes = np.stack([(c[:, 0] + c[:, 2]) / 2, (c[:, 1] + c[:, 3]) / 2, c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]], 1)
    return labels, boxes


def prepare_samples(
    cfg: PipelineConfig, events: np.ndarray, gts: Sequence[GroundTruth] = (), with_flip: bool = False
) -> List[Sample]:
    """Slice a stream and build frames, graph bundles and targets per slice (image id = slice index)."""
    by_image: Dict[int, List[GroundTruth]] = {}
    for g in gts:
        by_image.setdefault(g.image_id, []).append(g)
    gcfg = cfg.graph_config()
    samples = []
    for i, sl in enumerate(slice_stream(events, cfg.slice_interval)):
        frame = encode_slice(cfg, sl).data
        labels, boxes = _gt_arrays(by_image.get(i, []))
        s = Sample(i, frame, labels, boxes, build_bundle(EventTensor(frame), gcfg))
        if with_flip:
            fframe = np.ascontiguousarray(frame[..., ::-1])
            fboxes = boxes.copy()
            fboxes[:, 0] = 1.0 - fboxes[:, 0]
            s.flipped = Sample(i, fframe, labels, fboxes, build_bundle(EventTensor(fframe), gcfg))
        samples.append(s)
    return samples


class Detector(nn.Module):
    def __init__(self, cfg: PipelineConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_config())
        self.head = DetectionHead(cfg.stage_widths[3], cfg.num_classes, cfg.num_queries)

    def forward(self, frames: Tensor, bundles: Sequence[GraphBundle]) -> Dict[str, Tensor]:
        feats = self.backbone(frames, bundles)
        out = self.head(feats[-1])
        out["features"] = feats
        return out


def build_model(cfg: PipelineConfig) -> Detector:
    torch.manual_seed(cfg.seed)
    return Detector(cfg)


def _collate(samples: Sequence[Sample]):
    frames = torch.as_tensor(np.stack([s.frame for s in samples]), dtype=torch.float32)
    return frames, [s.bundle for s in samples]


def batch_loss(model: Detector, samples: Sequence[Sample]) -> Tuple[Tensor, Dict[str, float]]:
    """Mean over the batch of the selected-query loss plus the selection-head loss."""
    frames, bundles = _collate(samples)
    out = model(frames, bundles)
    if not all(torch.isfinite(out[k]).all() for k in ("logits", "boxes", "enc_logits", "all_boxes")):
        # matching needs finite costs; report the batch as diverged instead
        return frames.new_full((), float("nan")), {"total": float("nan")}
    w = model.cfg.loss_weights()
    total = frames.new_zeros(())
    stats = {"dec": 0.0, "enc": 0.0, "mean_iou": 0.0}
    for b, s in enumerate(samples):
        labels = torch.as_tensor(s.labels)
        boxes = torch.as_tensor(s.boxes)
        dec, dec_parts = detect_loss(out["logits"][b], out["boxes"][b], labels, boxes, w)
        enc, _ = detect_loss(out["enc_logits"][b], out["all_boxes"][b], labels, boxes, w)
        total = total + dec + enc
        stats["dec"] += dec_parts["total"] / len(samples)
        stats["enc"] += float(enc.detach()) / len(samples)
        stats["mean_iou"] += dec_parts["mean_iou"] / len(samples)
    total = total / len(samples)
    stats["total"] = float(total.detach())
    return total, stats


def detections_from_output(out: Dict[str, Tensor], image_ids: Sequence[int]) -> List[Detection]:
    """One detection per selected query and class, scored by that class's probability."""
    probs = out["logits"].sigmoid()
    corners = cxcywh_to_xyxy(out["boxes"]).clamp(0.0, 1.0)
    dets = []
    for b, img in enumerate(image_ids):
        for q in range(probs.shape[1]):
            box = tuple(float(v) for v in corners[b, q])
            dets.extend(Detection(int(img), c, float(p), box) for c, p in enumerate(probs[b, q].tolist()))
    return dets


@torch.no_grad()
def predict(model: Detector, samples: Sequence[Sample], batch_size: int = 32) -> List[Detection]:
    model.eval()
    dets: List[Detection] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        frames, bundles = _collate(chunk)
        dets.extend(detections_from_output(model(frames, bundles), [s.image_id for s in chunk]))
    model.train()
    return dets


def sample_ground_truth(samples: Sequence[Sample]) -> List[GroundTruth]:
    gts = []
    for s in samples:
        for c, b in zip(s.labels, s.boxes):
            cx, cy, w, h = (float(v) for v in b)
            gts.append(GroundTruth(s.image_id, int(c), (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
    return gts


def evaluate(model: Detector, samples: Sequence[Sample]) -> Tuple[List[Detection], Dict[str, float]]:
    dets = predict(model, samples)
    return dets, evaluate_map(dets, sample_ground_truth(samples))


@dataclass
class TrainResult:
    model: Detector
    losses: List[float] = field(default_factory=list)
    curve: List[Dict[str, float]] = field(default_factory=list)

    def loss_log(self) -> str:
        return "".join(f"{i} {v:.8f}\n" for i, v in enumerate(self.losses))


def train(
    cfg: PipelineConfig,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample] = (),
    dump_dir: Optional[str] = None,
) -> TrainResult:
    """AdamW on random mini-batches with optional horizontal flips; seeded.

    Validation mAP is recorded every ``cfg.eval_every`` steps and after the last step.

    Raises:
        TrainingDivergedError: on a non-finite loss; the offending batch ids and
            the last finite loss are written to ``dump_dir`` when given.
    """
    if not train_samples:
        raise ValueError("no training samples")
    model = build_model(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    for step in range(cfg.steps):
        idx = rng.choice(len(train_samples), size=min(cfg.batch_size, len(train_samples)), replace=False)
        flips = rng.random(len(idx)) < 0.5 if cfg.hflip else np.zeros(len(idx), dtype=bool)
        batch = []
        for i, f in zip(idx, flips):
            s = train_samples[i]
            batch.append(s.flipped if f and s.flipped is not None else s)
        loss, stats = batch_loss(model, batch)
        if not torch.isfinite(loss):
            msg = f"non-finite loss at step {step}: {stats}; batch image ids {[s.image_id for s in batch]}"
            if dump_dir:
                os.makedirs(dump_dir, exist_ok=True)
                with open(os.path.join(dump_dir, "divergence.txt"), "w") as fh:
                    fh.write(msg + "\n")
                    fh.write(f"last finite loss: {result.losses[-1] if result.losses else 'n/a'}\n")
                with open(os.path.join(dump_dir, "diverged_checkpoint.bin"), "wb") as fh:
                    fh.write(save_checkpoint(model.state_dict()))
            raise TrainingDivergedError(msg)
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.losses.append(loss.item())
        last = step == cfg.steps - 1
        if val_samples and ((step + 1) % cfg.eval_every == 0 or last):
            _, metrics = evaluate(model, val_samples)
            metrics["step"] = step + 1
            result.curve.append(metrics)
            log.info("step %d loss %.4f val mAP %.3f mAP50 %.3f", step + 1, result.losses[-1], metrics["mAP"], metrics["mAP50"])
    return result


# --------------------------------------------------------------------------- artefacts


def heatmap(feature: Tensor) -> np.ndarray:
    """Per-cell L2 norm over channels, max-normalised to 0..255."""
    norm = feature.detach().float().pow(2).sum(dim=0).sqrt().numpy()
    peak = norm.max()
    scaled = norm / peak if peak > 0 else norm
    return np.round(scaled * 255).astype(np.uint8)


def write_pgm(path: str, img: np.ndarray) -> None:
    """Binary (P5) portable graymap."""
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def format_metrics(metrics: Dict[str, float]) -> str:
    return "".join(f"{k} {v:.6f}\n" for k, v in metrics.items())


def save_model(model: Detector, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(model.state_dict()))


def load_model(cfg: PipelineConfig, path: str) -> Detector:
    model = build_model(cfg)
    with open(path, "rb") as fh:
        state = load_checkpoint(fh.read())
    model.load_state_dict(state)
    return model


def run_pipeline(
    cfg: PipelineConfig,
    events: np.ndarray,
    gts: Sequence[GroundTruth] = (),
    model: Optional[Detector] = None,
    out_dir: Optional[str] = None,
    heatmaps: bool = False,
) -> Tuple[List[Detection], Dict[str, float]]:
    """Full forward path on every slice of ``events``.

    With ``out_dir`` writes ``detections.txt``, ``metrics.txt``, ``config.txt``
    and, if ``heatmaps``, ``slice{i}_stage{j}.pgm`` feature maps.
    """
    model = model or build_model(cfg)
    samples = prepare_samples(cfg, events, gts)
    dets = predict(model, samples)
    metrics = evaluate_map(dets, list(gts)) if gts else {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "detections.txt"), "w") as fh:
            fh.write(format_detections(dets))
        with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
            fh.write(format_metrics(metrics))
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(serialize_config(cfg))
        if heatmaps:
            with torch.no_grad():
                model.eval()
                for s in samples:
                    frames, bundles = _collate([s])
                    feats = model(frames, bundles)["features"]
                    for j, f in enumerate(feats):
                        write_pgm(os.path.join(out_dir, f"slice{s.image_id}_stage{j + 1}.pgm"), heatmap(f[0]))
                model.train()
    return dets, metrics
