"""Detection scoring: inference, NMS, per-class AP50, spread and distance reports.

AP uses all-point interpolation with greedy one-to-one matching by
descending score; a ground-truth box absorbs at most one detection and
surplus detections on it count as false positives. Report spreads are
population standard deviations so they are exactly recomputable from the
per-class values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detsim import Box, Proposal, SceneSample, apply_box_delta, iou
from .model import DetectionModel
from .numeric import l2_normalize
from .resemblance import ClassCatalog, ResemblanceGroup


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


def _det_sort_key(det: Detection) -> tuple:
    return (-det.score, det.box.x1, det.box.y1, det.box.x2, det.box.y2)


def infer_scene(
    model: DetectionModel,
    proposals: list[Proposal],
    catalog: ClassCatalog,
    score_threshold: float = 0.05,
) -> list[Detection]:
    """Classify each proposal; emit refined boxes for non-background argmaxes.

    The detection score is the winning class's softmax mass renormalized
    over the non-background classes.
    """
    if not proposals:
        return []
    features = np.stack([p.feature for p in proposals])
    fwd = model.forward_batch(features)
    logits = fwd.cls_logits
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    detections: list[Detection] = []
    for i, proposal in enumerate(proposals):
        winner = int(np.argmax(probs[i]))
        if winner == catalog.background_id:
            continue
        non_bg = 1.0 - probs[i, catalog.background_id]
        score = float(probs[i, winner] / non_bg) if non_bg > 0.0 else 0.0
        if score < score_threshold:
            continue
        refined = apply_box_delta(proposal.box, fwd.box_deltas[i])
        detections.append(Detection(box=refined, class_id=winner, score=score))
    return detections


def nms(detections: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression of boxes overlapping a kept higher-score box.

    Ties break on score then box coordinates, so the result is independent
    of input order.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    kept: list[Detection] = []
    for class_id in sorted({d.class_id for d in detections}):
        candidates = sorted(
            (d for d in detections if d.class_id == class_id), key=_det_sort_key
        )
        survivors: list[Detection] = []
        for det in candidates:
            if all(iou(det.box, s.box) <= iou_threshold for s in survivors):
                survivors.append(det)
        kept.extend(survivors)
    return kept


def ap50_per_class(
    scene_detections: list[list[Detection]],
    scene_gts: list[tuple[list[Box], list[int]]],
    class_id: int,
    iou_threshold: float = 0.5,
) -> float | None:
    """All-point interpolated average precision for one class.

    Returns None when the class has no ground-truth instances (excluded
    from means rather than scored 0).
    """
    npos = sum(labels.count(class_id) for _, labels in scene_gts)
    if npos == 0:
        return None
    ranked: list[tuple[int, Detection]] = []
    for scene_idx, dets in enumerate(scene_detections):
        ranked.extend((scene_idx, d) for d in dets if d.class_id == class_id)
    ranked.sort(key=lambda item: (_det_sort_key(item[1]), item[0]))
    matched: dict[int, set[int]] = {}
    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for rank, (scene_idx, det) in enumerate(ranked):
        boxes, labels = scene_gts[scene_idx]
        taken = matched.setdefault(scene_idx, set())
        best_iou, best_gt = 0.0, -1
        for gt_idx, (gt_box, gt_label) in enumerate(zip(boxes, labels)):
            if gt_label != class_id or gt_idx in taken:
                continue
            overlap = iou(det.box, gt_box)
            if overlap > best_iou:
                best_iou, best_gt = overlap, gt_idx
        if best_gt >= 0 and best_iou >= iou_threshold:
            tp[rank] = 1.0
            taken.add(best_gt)
        else:
            fp[rank] = 1.0
    if not ranked:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / (tp_cum + fp_cum)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.shape[0] - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class APReport:
    """Per-class AP50 plus split means and population standard deviations."""

    per_class_ap50: dict[int, float]
    map50_base: float
    map50_novel: float
    map50_all: float
    std_novel: float
    std_all: float


def _population_std(values: list[float]) -> float:
    if not values:
        return float("nan")
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / len(values))


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else float("nan")


def std_report(per_class_ap50: dict[int, float], catalog: ClassCatalog) -> APReport:
    """Split means and population spreads over the classes present in the map."""
    base = [ap for cid, ap in per_class_ap50.items() if cid in catalog.base_classes]
    novel = [ap for cid, ap in per_class_ap50.items() if cid in catalog.novel_classes]
    everything = list(per_class_ap50.values())
    return APReport(
        per_class_ap50=dict(per_class_ap50),
        map50_base=_mean(base),
        map50_novel=_mean(novel),
        map50_all=_mean(everything),
        std_novel=_population_std(novel),
        std_all=_population_std(everything),
    )


def evaluate_model(
    model: DetectionModel,
    samples: list[SceneSample],
    catalog: ClassCatalog,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
) -> APReport:
    """AP50 report over a held-out split: infer, suppress, match, aggregate."""
    scene_dets = [
        nms(infer_scene(model, s.proposals, catalog, score_threshold), nms_iou)
        for s in samples
    ]
    scene_gts = [(s.scene.gt_boxes, s.scene.gt_labels) for s in samples]
    per_class: dict[int, float] = {}
    for cid in sorted(catalog.all_classes):
        ap = ap50_per_class(scene_dets, scene_gts, cid)
        if ap is not None:
            per_class[cid] = ap
    return std_report(per_class, catalog)


def classification_accuracy(
    model: DetectionModel, samples: list[SceneSample], catalog: ClassCatalog
) -> float:
    """Fraction of foreground proposals whose argmax class is the ground truth."""
    correct = total = 0
    for sample in samples:
        fg = [p for p in sample.proposals if p.gt_class != catalog.background_id]
        if not fg:
            continue
        fwd = model.forward_batch(np.stack([p.feature for p in fg]))
        preds = np.argmax(fwd.cls_logits, axis=1)
        correct += int(np.sum(preds == np.array([p.gt_class for p in fg])))
        total += len(fg)
    return correct / total if total else float("nan")


@dataclass
class DistanceReport:
    """Cosine distances between class-mean contrastive embeddings."""

    classes: list[int]
    class_mean_embeddings: dict[int, np.ndarray]
    distance_matrix: np.ndarray
    mean_within_group: float
    mean_outside_group: float
    excluded_classes: list[int] = field(default_factory=list)


def distance_report(
    model: DetectionModel,
    samples: list[SceneSample],
    catalog: ClassCatalog,
    group: ResemblanceGroup | None,
) -> DistanceReport:
    """Class-mean embedding distances, split into within-group pairs and
    pairs fully outside the group.

    Means are taken over normalized contrastive features of foreground
    proposals; classes without any foreground proposal are excluded and
    listed. Cosine distance is 1 - cosine similarity.
    """
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for sample in samples:
        fg = [p for p in sample.proposals if p.gt_class != catalog.background_id]
        if not fg:
            continue
        fwd = model.forward_batch(np.stack([p.feature for p in fg]))
        for p, feat in zip(fg, fwd.contrastive_features):
            unit = l2_normalize(feat)
            if p.gt_class in sums:
                sums[p.gt_class] += unit
                counts[p.gt_class] += 1
            else:
                sums[p.gt_class] = unit.copy()
                counts[p.gt_class] = 1
    classes = sorted(sums)
    excluded = sorted(catalog.all_classes - set(classes))
    means = {cid: l2_normalize(sums[cid] / counts[cid]) for cid in classes}
    n = len(classes)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist = 1.0 - float(means[classes[i]] @ means[classes[j]])
            matrix[i, j] = dist
            matrix[j, i] = dist
    member = [group is not None and cid in group for cid in classes]
    within = [
        matrix[i, j]
        for i in range(n)
        for j in range(i + 1, n)
        if member[i] and member[j]
    ]
    outside = [
        matrix[i, j]
        for i in range(n)
        for j in range(i + 1, n)
        if not member[i] and not member[j]
    ]
    return DistanceReport(
        classes=classes,
        class_mean_embeddings=means,
        distance_matrix=matrix,
        mean_within_group=_mean(within),
        mean_outside_group=_mean(outside),
        excluded_classes=excluded,
    )


def write_ap_report_csv(report: APReport, catalog: ClassCatalog, path: str | Path) -> None:
    """Columns: record,name,split,value — per-class rows then summary rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record", "name", "split", "value"])
        for cid in sorted(report.per_class_ap50):
            split = "novel" if catalog.is_novel(cid) else "base"
            writer.writerow(["class", cid, split, report.per_class_ap50[cid]])
        for name, value in [
            ("map50_base", report.map50_base),
            ("map50_novel", report.map50_novel),
            ("map50_all", report.map50_all),
            ("std_novel", report.std_novel),
            ("std_all", report.std_all),
        ]:
            writer.writerow(["summary", name, "", value])


def write_distance_report_csv(report: DistanceReport, path: str | Path) -> None:
    """Distance matrix block followed by the within/outside summary rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id"] + [str(c) for c in report.classes])
        for i, cid in enumerate(report.classes):
            writer.writerow([cid] + [report.distance_matrix[i, j] for j in range(len(report.classes))])
        writer.writerow(["mean_within_group", report.mean_within_group])
        writer.writerow(["mean_outside_group", report.mean_outside_group])
        writer.writerow(["excluded_classes"] + [str(c) for c in report.excluded_classes])
