"""Two-stage training driver: base pre-training, then K-shot fine-tuning with
the milestone-gated switch from general to refined contrastive batches.

Each step combines four loss terms: softmax classification over all
proposals (background included), smooth-L1 box regression over foreground
proposals, logistic objectness over all proposals, and the weighted
contrastive term. The encoder is trainable during base pre-training and
frozen during fine-tuning.

Confusable-pair mining runs during a window of the general-contrastive
phase (by default the second half of it, ending at the milestone): the
first fine-tuning iterations classify never-seen novel classes essentially
at random, and counting those transient misses would flood the group with
spurious pairs at low replication thresholds.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .contrastive import RCLConfig, rcl_loss, select_contrastive_batch
from .detsim import SceneSample, encode_box_delta
from .model import (
    STAGE_BASE_PRETRAIN,
    STAGE_FINETUNE,
    BatchForward,
    DetectionModel,
    freeze_policy,
)
from .numeric import (
    Param,
    binary_cross_entropy_batch,
    sgd_step,
    smooth_l1_batch,
    softmax_cross_entropy_batch,
)
from .resemblance import (
    ClassCatalog,
    MilestoneSchedule,
    Mode,
    PairCounter,
    ResemblanceGroup,
    materialize_group,
)

logger = logging.getLogger(__name__)

MODE_NONE = "none"
MODE_GCL = "gcl"
MODE_FSRC = "fsrc"

LOSS_CSV_HEADER = ["iteration", "L_cls", "L_Bbox", "L_objectness", "L_RCL", "total", "mode"]


class DivergenceError(RuntimeError):
    """A loss term became non-finite."""


@dataclass
class TrainConfig:
    # lr default raised from the reference 0.001: at this scale the K-shot
    # stage must learn novel classes inside the mining window, which the
    # smaller rate cannot do in the iteration budget
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_scenes: int = 16
    total_iterations: int = 400
    balance: float = 0.5
    temperature: float = 0.2
    iou_floor: float = 0.7
    group_iou_threshold: float = 0.5
    rep_threshold: int = 0
    milestone: float = 0.75
    mine_start_fraction: float | None = None
    group_refresh: bool = False
    contrastive_mode: str = MODE_FSRC
    include_background: bool = True
    kshot: int = 5
    hidden_dim: int = 64
    con_dim: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.milestone <= 1.0:
            raise ValueError("milestone must lie in [0, 1]")
        if self.contrastive_mode not in (MODE_NONE, MODE_GCL, MODE_FSRC):
            raise ValueError(f"unknown contrastive_mode {self.contrastive_mode!r}")
        if self.mine_start_fraction is not None and not 0.0 <= self.mine_start_fraction <= 1.0:
            raise ValueError("mine_start_fraction must lie in [0, 1]")

    def rcl_config(self) -> RCLConfig:
        return RCLConfig(
            temperature=self.temperature,
            iou_floor=self.iou_floor,
            balance=self.balance,
            include_background=self.include_background,
        )


@dataclass
class LossRow:
    iteration: int
    cls: float
    box: float
    objectness: float
    rcl: float
    total: float
    mode: str


@dataclass
class TrainState:
    current_iteration: int
    pair_counter: PairCounter
    group: ResemblanceGroup | None
    loss_history: list[LossRow] = field(default_factory=list)


@dataclass
class ProposalBatch:
    features: np.ndarray      # (n, d)
    gt_classes: np.ndarray    # (n,)
    ious: np.ndarray          # (n,)
    fg_mask: np.ndarray       # (n,) bool
    box_targets: np.ndarray   # (n, 4); rows only meaningful where fg


def collect_batch(samples: list[SceneSample], catalog: ClassCatalog) -> ProposalBatch:
    features, gt_classes, ious, fg_mask, box_targets = [], [], [], [], []
    for sample in samples:
        for p in sample.proposals:
            features.append(p.feature)
            gt_classes.append(p.gt_class)
            ious.append(p.iou)
            fg = p.gt_class != catalog.background_id
            fg_mask.append(fg)
            if fg and p.matched_gt_index is not None:
                box_targets.append(
                    encode_box_delta(p.box, sample.scene.gt_boxes[p.matched_gt_index])
                )
            else:
                box_targets.append(np.zeros(4))
    return ProposalBatch(
        features=np.stack(features),
        gt_classes=np.array(gt_classes, dtype=np.int64),
        ious=np.array(ious, dtype=np.float64),
        fg_mask=np.array(fg_mask, dtype=bool),
        box_targets=np.stack(box_targets),
    )


@dataclass
class LossBundle:
    """Composite-loss terms with the gradients of each head output."""

    fwd: BatchForward
    cls: float
    box: float
    objectness: float
    rcl: float
    grad_cls: np.ndarray
    grad_box: np.ndarray
    grad_obj: np.ndarray
    grad_con: np.ndarray | None
    pred_classes: np.ndarray

    def terms(self) -> tuple[float, float, float, float]:
        return self.cls, self.box, self.objectness, self.rcl


def compute_losses(
    model: DetectionModel,
    batch: ProposalBatch,
    config: TrainConfig,
    catalog: ClassCatalog,
    select_mode: Mode,
    group: ResemblanceGroup | None,
) -> LossBundle:
    """Forward pass plus all four loss terms and their head-output gradients.

    Classification averages over every proposal, box regression over
    foreground proposals only, objectness over every proposal; the
    contrastive term follows the selected phase. The contrastive gradient
    is already scaled by the balance weight.
    """
    n = batch.features.shape[0]
    if n == 0:
        raise ValueError("empty proposal batch")
    fwd = model.forward_batch(batch.features)
    for term, output in (
        ("L_cls", fwd.cls_logits),
        ("L_Bbox", fwd.box_deltas),
        ("L_objectness", fwd.objectness_logits),
        ("L_RCL", fwd.contrastive_features),
    ):
        if not np.all(np.isfinite(output)):
            raise DivergenceError(f"loss term {term} has non-finite inputs (model diverged)")

    cls_losses, grad_cls = softmax_cross_entropy_batch(fwd.cls_logits, batch.gt_classes)
    loss_cls = float(np.sum(cls_losses)) / n
    grad_cls /= n

    fg_indices = np.nonzero(batch.fg_mask)[0]
    loss_box = 0.0
    grad_box = np.zeros_like(fwd.box_deltas)
    if fg_indices.size:
        box_losses, box_grads = smooth_l1_batch(
            fwd.box_deltas[fg_indices], batch.box_targets[fg_indices]
        )
        loss_box = float(np.sum(box_losses)) / fg_indices.size
        grad_box[fg_indices] = box_grads / fg_indices.size

    obj_losses, grad_obj = binary_cross_entropy_batch(
        fwd.objectness_logits, batch.fg_mask.astype(np.float64)
    )
    loss_obj = float(np.sum(obj_losses)) / n
    grad_obj /= n

    # prediction = full argmax (background included); used by mining and the
    # RCL gate, with background predictions filtered by the pair counter
    pred_classes = np.argmax(fwd.cls_logits, axis=1)

    loss_rcl = 0.0
    grad_con = None
    if config.contrastive_mode != MODE_NONE:
        rcl_cfg = config.rcl_config()
        con_batch, indices = select_contrastive_batch(
            pred_classes,
            batch.gt_classes,
            batch.ious,
            fwd.contrastive_features,
            group,
            select_mode,
            catalog.background_id,
            rcl_cfg,
        )
        loss_rcl, grad_selected = rcl_loss(con_batch, rcl_cfg)
        grad_con = np.zeros_like(fwd.contrastive_features)
        grad_con[indices] = config.balance * grad_selected

    for name, value in (
        ("L_cls", loss_cls),
        ("L_Bbox", loss_box),
        ("L_objectness", loss_obj),
        ("L_RCL", loss_rcl),
    ):
        if not math.isfinite(value):
            raise DivergenceError(f"loss term {name} is non-finite ({value})")
    return LossBundle(
        fwd=fwd,
        cls=loss_cls,
        box=loss_box,
        objectness=loss_obj,
        rcl=loss_rcl,
        grad_cls=grad_cls,
        grad_box=grad_box,
        grad_obj=grad_obj,
        grad_con=grad_con,
        pred_classes=pred_classes,
    )


def train_step(
    model: DetectionModel,
    trainable: list[Param],
    batch: ProposalBatch,
    config: TrainConfig,
    catalog: ClassCatalog,
    select_mode: Mode,
    group: ResemblanceGroup | None,
    counter: PairCounter | None,
    mining_active: bool,
) -> tuple[float, float, float, float]:
    """One optimization step; returns (cls, box, objectness, rcl) losses.

    When mining is active every foreground proposal is offered to the pair
    counter (using this step's pre-update predictions) before the update.
    """
    bundle = compute_losses(model, batch, config, catalog, select_mode, group)
    if mining_active and counter is not None:
        for i in np.nonzero(batch.fg_mask)[0]:
            counter.observe(
                int(bundle.pred_classes[i]), int(batch.gt_classes[i]), float(batch.ious[i])
            )
    model.backward(
        bundle.fwd,
        grad_cls=bundle.grad_cls,
        grad_box=bundle.grad_box,
        grad_obj=bundle.grad_obj,
        grad_con=bundle.grad_con,
    )
    sgd_step(trainable, config.lr, config.momentum, config.weight_decay)
    for p in model.params:
        p.zero_grad()
    return bundle.terms()


def _sample_batch(
    samples: list[SceneSample], batch_scenes: int, rng: np.random.Generator
) -> list[SceneSample]:
    idx = rng.integers(0, len(samples), size=batch_scenes)
    return [samples[int(i)] for i in idx]


def run_base_pretrain(
    model: DetectionModel,
    samples: list[SceneSample],
    config: TrainConfig,
    catalog: ClassCatalog,
) -> list[LossRow]:
    """Train all parameters on base-class scenes, contrastive term disabled."""
    if any(
        label in catalog.novel_classes
        for s in samples
        for label in s.scene.gt_labels
    ):
        raise ValueError("base pre-training data must not contain novel classes")
    config = replace(config, contrastive_mode=MODE_NONE)
    trainable = freeze_policy(model, STAGE_BASE_PRETRAIN)
    rng = np.random.default_rng([config.seed, 101])
    history: list[LossRow] = []
    for it in range(config.total_iterations):
        batch = collect_batch(_sample_batch(samples, config.batch_scenes, rng), catalog)
        l_cls, l_box, l_obj, l_rcl = train_step(
            model, trainable, batch, config, catalog,
            select_mode=Mode.GCL, group=None, counter=None, mining_active=False,
        )
        total = l_cls + l_box + l_obj + config.balance * l_rcl
        history.append(LossRow(it, l_cls, l_box, l_obj, l_rcl, total, MODE_NONE))
    return history


def run_finetune(
    model: DetectionModel,
    samples: list[SceneSample],
    config: TrainConfig,
    catalog: ClassCatalog,
) -> TrainState:
    """K-shot fine-tuning with the encoder frozen.

    Under the ``fsrc`` mode the resemblance group is materialized once at
    the milestone iteration and batch selection switches to RCL; with an
    empty group the run logs a warning and keeps general selection. The
    ``gcl`` mode never switches but still mines pairs for reporting, and
    ``none`` disables the contrastive branch entirely.
    """
    trainable = freeze_policy(model, STAGE_FINETUNE)
    schedule = MilestoneSchedule(config.milestone, config.total_iterations)
    switch = schedule.switch_index
    mine_fraction = (
        config.mine_start_fraction
        if config.mine_start_fraction is not None
        else config.milestone / 2.0
    )
    mine_start = math.floor(mine_fraction * config.total_iterations)
    counter = PairCounter(
        iou_threshold=config.group_iou_threshold, background_id=catalog.background_id
    )
    state = TrainState(current_iteration=0, pair_counter=counter, group=None)
    rng = np.random.default_rng([config.seed, 202])
    rcl_active = False
    for it in range(config.total_iterations):
        state.current_iteration = it
        if config.contrastive_mode == MODE_FSRC and it == switch and state.group is None:
            state.group = materialize_group(counter, config.rep_threshold, catalog)
            if not state.group:
                logger.warning(
                    "resemblance group empty at milestone iteration %d; "
                    "continuing with general contrastive selection", it,
                )
            rcl_active = bool(state.group)
        if config.group_refresh and rcl_active and it > switch:
            state.group = materialize_group(counter, config.rep_threshold, catalog)
        select_mode = Mode.RCL if rcl_active else Mode.GCL
        mining = (
            config.contrastive_mode != MODE_NONE
            and mine_start <= it
            and (it < switch or config.group_refresh)
        )
        batch = collect_batch(_sample_batch(samples, config.batch_scenes, rng), catalog)
        l_cls, l_box, l_obj, l_rcl = train_step(
            model, trainable, batch, config, catalog,
            select_mode=select_mode, group=state.group, counter=counter,
            mining_active=mining,
        )
        total = l_cls + l_box + l_obj + config.balance * l_rcl
        mode_label = config.contrastive_mode if config.contrastive_mode == MODE_NONE else select_mode.value
        state.loss_history.append(LossRow(it, l_cls, l_box, l_obj, l_rcl, total, mode_label))
    state.current_iteration = config.total_iterations
    return state


def write_loss_csv(history: list[LossRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_HEADER)
        for row in history:
            writer.writerow(
                [row.iteration, row.cls, row.box, row.objectness, row.rcl, row.total, row.mode]
            )
