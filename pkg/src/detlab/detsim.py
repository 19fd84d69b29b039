"""Synthetic detection world: prototypes, scenes, controlled-IoU proposals.

Class semantics live in unit prototype vectors: unrelated classes sit on
orthogonal directions while configured confusable pairs are planted at an
exact angle, so the ground truth of "which classes resemble each other" is
known. Every scene holds one ground-truth box; proposals around it are
jittered to an exactly-known IoU (concentric shrink above 0.5, single-axis
shift below) and carry features that blend the true prototype with a random
other class in proportion to the missing overlap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .resemblance import ClassCatalog

DATASET_FORMAT = "detlab-dataset"
DATASET_VERSION = 1

# background features are isotropic Gaussian with this norm scale, kept
# independent of noise_sigma so they stay normalizable in noiseless worlds
BACKGROUND_FEATURE_NORM = 0.5


class GenerationError(ValueError):
    """Dataset configuration cannot be realized."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized image coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def encode_box_delta(proposal: Box, gt: Box) -> np.ndarray:
    """Regression target: center offsets over proposal size, log size ratios."""
    pw, ph = proposal.x2 - proposal.x1, proposal.y2 - proposal.y1
    gw, gh = gt.x2 - gt.x1, gt.y2 - gt.y1
    pcx, pcy = (proposal.x1 + proposal.x2) / 2.0, (proposal.y1 + proposal.y2) / 2.0
    gcx, gcy = (gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0
    return np.array(
        [(gcx - pcx) / pw, (gcy - pcy) / ph, math.log(gw / pw), math.log(gh / ph)]
    )


def apply_box_delta(box: Box, delta: np.ndarray, min_size: float = 1e-4) -> Box:
    """Inverse of :func:`encode_box_delta`, clipped back into the unit square."""
    pw, ph = box.x2 - box.x1, box.y2 - box.y1
    cx = (box.x1 + box.x2) / 2.0 + float(delta[0]) * pw
    cy = (box.y1 + box.y2) / 2.0 + float(delta[1]) * ph
    w = pw * math.exp(float(np.clip(delta[2], -4.0, 4.0)))
    h = ph * math.exp(float(np.clip(delta[3], -4.0, 4.0)))
    x1 = min(max(cx - w / 2.0, 0.0), 1.0 - min_size)
    y1 = min(max(cy - h / 2.0, 0.0), 1.0 - min_size)
    x2 = max(min(cx + w / 2.0, 1.0), x1 + min_size)
    y2 = max(min(cy + h / 2.0, 1.0), y1 + min_size)
    return Box(x1, y1, x2, y2)


@dataclass
class ClassSpec:
    class_id: int
    prototype: np.ndarray
    is_novel: bool


@dataclass
class Scene:
    gt_boxes: list[Box]
    gt_labels: list[int]

    def __post_init__(self) -> None:
        if len(self.gt_boxes) != len(self.gt_labels) or not self.gt_boxes:
            raise ValueError("a scene needs equally many boxes and labels, at least one")


@dataclass
class Proposal:
    box: Box
    feature: np.ndarray
    matched_gt_index: int | None
    iou: float
    gt_class: int


@dataclass
class SceneSample:
    scene: Scene
    proposals: list[Proposal]


@dataclass
class DatasetConfig:
    num_base: int = 12
    num_novel: int = 4
    embed_dim: int = 32
    confusable_pairs: list[tuple[int, int, float]] = field(
        default_factory=lambda: [(0, 12, 15.0), (1, 13, 15.0)]
    )
    noise_sigma: float = 0.05
    mix_max: float = 0.5
    proposals_per_gt: int = 6
    background_per_scene: int = 2
    fg_iou_threshold: float = 0.5
    base_train_scenes: int = 240
    pool_scenes_per_class: int = 30
    test_scenes_per_class: int = 8
    seed: int = 7

    def __post_init__(self) -> None:
        self.confusable_pairs = [tuple(p) for p in self.confusable_pairs]
        num_classes = self.num_base + self.num_novel
        if self.embed_dim < num_classes:
            raise GenerationError(
                f"embed_dim {self.embed_dim} < {num_classes} classes; prototypes "
                "cannot be kept near-orthogonal"
            )
        used: set[int] = set()
        novel = set(range(self.num_base, num_classes))
        for a, b, angle in self.confusable_pairs:
            if not (0 <= a < num_classes and 0 <= b < num_classes) or a == b:
                raise GenerationError(f"confusable pair ({a}, {b}) has invalid class ids")
            if not 0.0 < angle <= 90.0:
                raise GenerationError(
                    f"confusable pair ({a}, {b}): angle {angle} outside (0, 90] degrees"
                )
            if not ({a, b} & novel):
                raise GenerationError(f"confusable pair ({a}, {b}) contains no novel class")
            if {a, b} & used:
                raise GenerationError(f"class reused across confusable pairs: ({a}, {b})")
            used |= {a, b}
        if not 0.0 <= self.mix_max <= 1.0:
            raise GenerationError("mix_max must lie in [0, 1]")
        if not 0.0 < self.fg_iou_threshold < 1.0:
            raise GenerationError("fg_iou_threshold must lie in (0, 1)")

    @property
    def num_classes(self) -> int:
        return self.num_base + self.num_novel

    def catalog(self) -> ClassCatalog:
        return ClassCatalog(
            base_classes=frozenset(range(self.num_base)),
            novel_classes=frozenset(range(self.num_base, self.num_classes)),
            background_id=self.num_classes,
        )


def generate_prototypes(config: DatasetConfig, rng: np.random.Generator) -> list[ClassSpec]:
    """Unit prototypes: orthogonal basis directions, with each confusable pair
    rotated to its exact target angle inside the span of two basis vectors."""
    d, c = config.embed_dim, config.num_classes
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    protos = [basis[:, i].copy() for i in range(c)]
    for a, b, angle in config.confusable_pairs:
        theta = math.radians(angle)
        protos[b] = math.cos(theta) * basis[:, a] + math.sin(theta) * basis[:, b]
    paired = {cid for a, b, _ in config.confusable_pairs for cid in (a, b)}
    pair_set = {frozenset((a, b)) for a, b, _ in config.confusable_pairs}
    for i in range(c):
        for j in range(i + 1, c):
            cos_ij = float(np.clip(protos[i] @ protos[j], -1.0, 1.0))
            deg = math.degrees(math.acos(cos_ij))
            if frozenset((i, j)) not in pair_set and deg < 60.0 - 1e-9:
                raise GenerationError(
                    f"classes {i} and {j} ended up {deg:.1f} degrees apart (< 60)"
                )
    novel = set(range(config.num_base, c))
    return [ClassSpec(i, protos[i], i in novel) for i in range(c)]


def _random_gt_box(rng: np.random.Generator) -> Box:
    # sizes/centers chosen so exact-IoU jitter never leaves the unit square
    w = rng.uniform(0.1, 0.25)
    h = rng.uniform(0.1, 0.25)
    cx = rng.uniform(0.35, 0.65)
    cy = rng.uniform(0.35, 0.65)
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def _jitter_box(gt: Box, target_iou: float, rng: np.random.Generator) -> Box:
    """Box with exactly ``target_iou`` against ``gt``.

    Above 0.5 the box is a concentric shrink (IoU = scale^2); below, the
    box keeps its size and shifts along one axis (IoU = (L-dx)/(L+dx)).
    """
    w, h = gt.x2 - gt.x1, gt.y2 - gt.y1
    if target_iou >= 0.5:
        s = math.sqrt(target_iou)
        cx, cy = (gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0
        return Box(cx - s * w / 2.0, cy - s * h / 2.0, cx + s * w / 2.0, cy + s * h / 2.0)
    axis = int(rng.integers(0, 2))
    sign = 1.0 if rng.integers(0, 2) else -1.0
    length = w if axis == 0 else h
    shift = sign * length * (1.0 - target_iou) / (1.0 + target_iou)
    dx, dy = (shift, 0.0) if axis == 0 else (0.0, shift)
    return Box(gt.x1 + dx, gt.y1 + dy, gt.x2 + dx, gt.y2 + dy)


def make_proposal_feature(
    prototype: np.ndarray,
    other_prototype: np.ndarray,
    proposal_iou: float,
    mix: float,
    noise: np.ndarray,
) -> np.ndarray:
    """Blend prototypes by overlap: iou * own + (1-iou) * mix * other + noise."""
    return proposal_iou * prototype + (1.0 - proposal_iou) * mix * other_prototype + noise


def generate_scene_with_proposals(
    prototypes: list[ClassSpec],
    config: DatasetConfig,
    rng: np.random.Generator,
    class_id: int | None = None,
) -> SceneSample:
    """One single-instance scene plus jittered and background proposals.

    Jittered proposals alternate between the high-IoU U(0.5, 0.99) and
    low-IoU U(0.1, 0.5) halves of the mixture, so every scene carries
    foreground candidates on both sides of the foreground threshold. A
    jittered box below the threshold is labeled background but keeps its
    measured IoU.
    """
    background_id = config.num_classes
    if class_id is None:
        class_id = int(rng.integers(0, config.num_classes))
    gt_box = _random_gt_box(rng)
    scene = Scene(gt_boxes=[gt_box], gt_labels=[class_id])
    proto = prototypes[class_id].prototype
    proposals: list[Proposal] = []
    for j in range(config.proposals_per_gt):
        if j % 2 == 0:
            target = float(rng.uniform(0.5, 0.99))
        else:
            target = float(rng.uniform(0.1, 0.5))
        box = _jitter_box(gt_box, target, rng)
        other_id = int(rng.integers(0, config.num_classes - 1))
        if other_id >= class_id:
            other_id += 1
        mix = float(rng.uniform(0.0, config.mix_max))
        noise = rng.normal(0.0, config.noise_sigma, config.embed_dim)
        feature = make_proposal_feature(
            proto, prototypes[other_id].prototype, target, mix, noise
        )
        label = class_id if target >= config.fg_iou_threshold else background_id
        proposals.append(
            Proposal(box=box, feature=feature, matched_gt_index=0, iou=target, gt_class=label)
        )
    sigma_bg = BACKGROUND_FEATURE_NORM / math.sqrt(config.embed_dim)
    for _ in range(config.background_per_scene):
        for _attempt in range(100):
            w = rng.uniform(0.05, 0.2)
            h = rng.uniform(0.05, 0.2)
            cx = rng.uniform(0.1, 0.9)
            cy = rng.uniform(0.1, 0.9)
            box = Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
            if all(iou(box, g) < config.fg_iou_threshold for g in scene.gt_boxes):
                break
        else:
            raise GenerationError("could not place a background box off the ground truth")
        feature = rng.normal(0.0, sigma_bg, config.embed_dim)
        proposals.append(
            Proposal(box=box, feature=feature, matched_gt_index=None, iou=0.0, gt_class=background_id)
        )
    return SceneSample(scene=scene, proposals=proposals)


@dataclass
class SyntheticDataset:
    config: DatasetConfig
    class_specs: list[ClassSpec]
    splits: dict[str, list[SceneSample]]

    def catalog(self) -> ClassCatalog:
        return self.config.catalog()


def generate_dataset(config: DatasetConfig) -> SyntheticDataset:
    """Full world: base-training, fine-tuning pool, and held-out test splits."""
    proto_rng = np.random.default_rng([config.seed, 0])
    class_specs = generate_prototypes(config, proto_rng)

    base_rng = np.random.default_rng([config.seed, 1])
    base_train = [
        generate_scene_with_proposals(
            class_specs, config, base_rng, class_id=i % config.num_base
        )
        for i in range(config.base_train_scenes)
    ]

    pool_rng = np.random.default_rng([config.seed, 2])
    pool = [
        generate_scene_with_proposals(class_specs, config, pool_rng, class_id=cid)
        for cid in range(config.num_classes)
        for _ in range(config.pool_scenes_per_class)
    ]

    test_rng = np.random.default_rng([config.seed, 3])
    test = [
        generate_scene_with_proposals(class_specs, config, test_rng, class_id=cid)
        for cid in range(config.num_classes)
        for _ in range(config.test_scenes_per_class)
    ]
    return SyntheticDataset(
        config=config,
        class_specs=class_specs,
        splits={"base_train": base_train, "pool": pool, "test": test},
    )


def sample_kshot(
    samples: list[SceneSample],
    k: int,
    catalog: ClassCatalog,
    rng: np.random.Generator,
) -> list[SceneSample]:
    """Balanced subset with exactly k ground-truth instances per real class."""
    by_class: dict[int, list[int]] = {cid: [] for cid in sorted(catalog.all_classes)}
    for idx, sample in enumerate(samples):
        for label in sample.scene.gt_labels:
            by_class.setdefault(label, []).append(idx)
    chosen: list[int] = []
    for cid in sorted(catalog.all_classes):
        pool = by_class.get(cid, [])
        if len(pool) < k:
            raise ValueError(
                f"class {cid} has only {len(pool)} instances, cannot sample {k} shots"
            )
        picked = rng.choice(len(pool), size=k, replace=False)
        chosen.extend(pool[int(i)] for i in sorted(picked))
    return [samples[i] for i in chosen]


def _sample_to_json(split: str, index: int, sample: SceneSample) -> dict:
    return {
        "split": split,
        "index": index,
        "gt_boxes": [b.as_list() for b in sample.scene.gt_boxes],
        "gt_labels": sample.scene.gt_labels,
        "proposals": [
            {
                "box": p.box.as_list(),
                "feature": p.feature.tolist(),
                "matched_gt": p.matched_gt_index,
                "iou": p.iou,
                "gt_class": p.gt_class,
            }
            for p in sample.proposals
        ],
    }


def save_dataset(dataset: SyntheticDataset, path: str | Path) -> None:
    """Line-delimited JSON: one header record, then one record per scene."""
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": asdict(dataset.config),
        "background_id": dataset.config.num_classes,
        "classes": [
            {"id": s.class_id, "is_novel": s.is_novel, "prototype": s.prototype.tolist()}
            for s in dataset.class_specs
        ],
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in sorted(dataset.splits):
            for index, sample in enumerate(dataset.splits[split]):
                fh.write(json.dumps(_sample_to_json(split, index, sample), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> SyntheticDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path} is not a {DATASET_FORMAT} file")
        if header.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('version')}")
        config = DatasetConfig(**{
            **header["config"],
            "confusable_pairs": [tuple(p) for p in header["config"]["confusable_pairs"]],
        })
        class_specs = [
            ClassSpec(c["id"], np.asarray(c["prototype"], dtype=np.float64), c["is_novel"])
            for c in header["classes"]
        ]
        splits: dict[str, list[SceneSample]] = {}
        for line in fh:
            rec = json.loads(line)
            scene = Scene(
                gt_boxes=[Box(*b) for b in rec["gt_boxes"]],
                gt_labels=list(rec["gt_labels"]),
            )
            proposals = [
                Proposal(
                    box=Box(*p["box"]),
                    feature=np.asarray(p["feature"], dtype=np.float64),
                    matched_gt_index=p["matched_gt"],
                    iou=p["iou"],
                    gt_class=p["gt_class"],
                )
                for p in rec["proposals"]
            ]
            splits.setdefault(rec["split"], []).append(SceneSample(scene, proposals))
    return SyntheticDataset(config=config, class_specs=class_specs, splits=splits)
