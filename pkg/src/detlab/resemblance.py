"""Confusable-class mining: pair counting, group materialization, phase switching.

During the general-contrastive phase the trainer streams misclassified
high-IoU foreground proposals into a :class:`PairCounter`; at the milestone
iteration the counter is reduced to a :class:`ResemblanceGroup` (pairs seen
often enough and touching at least one novel class), and contrastive batch
selection switches from GCL to RCL.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path


class Mode(str, enum.Enum):
    """Contrastive batch-selection phase."""

    GCL = "gcl"
    RCL = "rcl"


@dataclass(frozen=True)
class ClassCatalog:
    """Base/novel class-id split plus the reserved background id."""

    base_classes: frozenset[int]
    novel_classes: frozenset[int]
    background_id: int

    def __post_init__(self) -> None:
        if self.base_classes & self.novel_classes:
            raise ValueError("base and novel class sets overlap")
        if self.background_id in self.base_classes | self.novel_classes:
            raise ValueError("background id collides with a real class")

    @property
    def all_classes(self) -> frozenset[int]:
        return self.base_classes | self.novel_classes

    def is_novel(self, class_id: int) -> bool:
        return class_id in self.novel_classes


@dataclass(frozen=True, order=True)
class ResemblancePair:
    """Unordered pair of distinct non-background classes, stored canonically."""

    class_a: int
    class_b: int

    def __post_init__(self) -> None:
        if self.class_a >= self.class_b:
            raise ValueError("pair must be canonical: class_a < class_b")

    @classmethod
    def canonical(cls, first: int, second: int) -> "ResemblancePair":
        if first == second:
            raise ValueError("a resemblance pair needs two distinct classes")
        return cls(min(first, second), max(first, second))

    def contains_any(self, classes: frozenset[int]) -> bool:
        return self.class_a in classes or self.class_b in classes


@dataclass
class PairCounter:
    """Replication counts of misclassification pairs above an IoU threshold."""

    iou_threshold: float
    background_id: int
    counts: dict[ResemblancePair, int] = field(default_factory=dict)

    def observe(self, pred_class: int, gt_class: int, iou: float) -> bool:
        """Record one proposal; returns True if a pair was counted.

        A pair is counted only for a strictly-above-threshold IoU, a wrong
        prediction, and a non-background prediction. The ground-truth class
        must be a real class (callers filter background proposals out).
        """
        if gt_class == self.background_id:
            raise ValueError("observe() expects foreground proposals only")
        if iou <= self.iou_threshold:
            return False
        if pred_class == gt_class or pred_class == self.background_id:
            return False
        pair = ResemblancePair.canonical(pred_class, gt_class)
        self.counts[pair] = self.counts.get(pair, 0) + 1
        return True


@dataclass(frozen=True)
class ResemblanceGroup:
    """Unduplicated class labels drawn from the retained resemblance pairs."""

    classes: frozenset[int]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.classes

    def __len__(self) -> int:
        return len(self.classes)

    def __bool__(self) -> bool:
        return bool(self.classes)


def materialize_group(
    counter: PairCounter, rep_threshold: int, catalog: ClassCatalog
) -> ResemblanceGroup:
    """Union of classes from pairs with count strictly above ``rep_threshold``
    and at least one novel member."""
    kept: set[int] = set()
    for pair, count in counter.counts.items():
        if count > rep_threshold and pair.contains_any(catalog.novel_classes):
            kept.add(pair.class_a)
            kept.add(pair.class_b)
    return ResemblanceGroup(frozenset(kept))


@dataclass(frozen=True)
class MilestoneSchedule:
    """Maps an iteration index to the GCL/RCL phase."""

    milestone_fraction: float
    total_iterations: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.milestone_fraction <= 1.0:
            raise ValueError("milestone_fraction must lie in [0, 1]")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")

    @property
    def switch_index(self) -> int:
        return math.floor(self.milestone_fraction * self.total_iterations)

    def mode(self, current_iteration: int) -> Mode:
        if not 0 <= current_iteration < self.total_iterations:
            raise ValueError(
                f"iteration {current_iteration} outside [0, {self.total_iterations})"
            )
        return Mode.RCL if current_iteration >= self.switch_index else Mode.GCL


def replication_histogram(
    counter: PairCounter, catalog: ClassCatalog
) -> list[tuple[ResemblancePair, int, bool]]:
    """(pair, count, has_novel) rows sorted by count descending, then pair order."""
    rows = [
        (pair, count, pair.contains_any(catalog.novel_classes))
        for pair, count in counter.counts.items()
    ]
    rows.sort(key=lambda row: (-row[1], row[0]))
    return rows


def write_histogram_csv(
    rows: list[tuple[ResemblancePair, int, bool]], path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_a", "pair_b", "replications", "has_novel"])
        for pair, count, has_novel in rows:
            writer.writerow([pair.class_a, pair.class_b, count, int(has_novel)])
