"""IoU-weighted supervised contrastive loss over proposal embeddings.

The loss averages, over every proposal in the batch, an IoU-gated per-anchor
term: the anchor weight is 1 when the proposal's IoU clears the floor and 0
otherwise, and the per-anchor term is the mean negative log-probability of
its same-label partners under a temperature-scaled softmax over all other
batch members. Features enter raw and are L2-normalized inside the loss, so
the returned gradient is taken with respect to the raw features.

Batch membership depends on the training phase: before the milestone every
foreground proposal participates (GCL); afterwards only proposals whose
predicted or ground-truth class touches the mined resemblance group do
(RCL). Background proposals ride along as extra negatives in both phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numeric import NORM_FLOOR, DegenerateInputError, check_finite
from .resemblance import Mode, ResemblanceGroup


class EmptyBatchError(ValueError):
    """Per-anchor loss asked for on a batch with fewer than two proposals."""


@dataclass
class RCLConfig:
    """Knobs of the contrastive term.

    temperature: softmax temperature on cosine similarities.
    iou_floor: anchors below this IoU get weight zero (they remain negatives).
    balance: weight of the contrastive term inside the composite loss.
    reweight_mode: shape of the surviving anchors' weight; only the constant
        1.0 variant is supported.
    include_background: whether background proposals join RCL-phase batches
        as negatives (they always join GCL-phase batches).
    """

    temperature: float = 0.2
    iou_floor: float = 0.7
    balance: float = 0.5
    reweight_mode: str = "constant-one"
    include_background: bool = True

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.iou_floor <= 1.0:
            raise ValueError("iou_floor must lie in [0, 1]")
        if self.balance < 0.0:
            raise ValueError("balance must be non-negative")
        if self.reweight_mode != "constant-one":
            raise ValueError(f"unsupported reweight_mode: {self.reweight_mode!r}")


@dataclass
class ContrastiveBatch:
    """Per-proposal inputs of the contrastive loss.

    raw_features: (n, d) pre-normalization embeddings.
    labels: (n,) ground-truth class of each proposal (background included).
    ious: (n,) IoU of each proposal with its matched ground-truth box.
    in_group: (n,) whether the proposal passed the resemblance-group gate.
    """

    raw_features: np.ndarray
    labels: np.ndarray
    ious: np.ndarray
    in_group: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.raw_features = check_finite(self.raw_features, "raw_features")
        if self.raw_features.ndim != 2:
            raise ValueError("raw_features must be 2-D")
        n = self.raw_features.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ious = check_finite(self.ious, "ious")
        if self.in_group is None:
            self.in_group = np.zeros(n, dtype=bool)
        self.in_group = np.asarray(self.in_group, dtype=bool)
        if not (self.labels.shape == (n,) and self.ious.shape == (n,) and self.in_group.shape == (n,)):
            raise ValueError("labels/ious/in_group must all have length n")
        if n and (self.ious.min() < 0.0 or self.ious.max() > 1.0):
            raise ValueError("ious must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.raw_features.shape[0]


def anchor_weight(iou: float, config: RCLConfig) -> float:
    """IoU cut-off weight: 1.0 at or above the floor, 0.0 below."""
    if not 0.0 <= iou <= 1.0:
        raise ValueError("iou must lie in [0, 1]")
    return 1.0 if iou >= config.iou_floor else 0.0


def _normalized_rows(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms <= NORM_FLOOR):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"feature row {bad} has near-zero norm")
    return features / norms[:, None], norms


def per_anchor_loss(batch: ContrastiveBatch, i: int, temperature: float) -> float:
    """Anchor i's mean negative log-probability of its same-label partners.

    Computed as a plain scalar loop with log-sum-exp stabilization. Anchors
    without a same-label partner contribute 0.
    """
    n = batch.size
    if n < 2:
        raise EmptyBatchError("per-anchor loss needs a batch of at least 2 proposals")
    if not 0 <= i < n:
        raise ValueError(f"anchor index {i} outside [0, {n})")
    z, _ = _normalized_rows(batch.raw_features)
    logits = [float(z[i] @ z[k]) / temperature for k in range(n) if k != i]
    others = [k for k in range(n) if k != i]
    positives = [j for idx, j in enumerate(others) if batch.labels[j] == batch.labels[i]]
    if not positives:
        return 0.0
    m = max(logits)
    lse = m + np.log(sum(np.exp(l - m) for l in logits))
    total = 0.0
    for idx, j in enumerate(others):
        if batch.labels[j] == batch.labels[i]:
            total += logits[idx] - lse
    return -total / len(positives)


def rcl_loss(batch: ContrastiveBatch, config: RCLConfig) -> tuple[float, np.ndarray]:
    """Batch contrastive loss and its gradient w.r.t. the raw features.

    loss = (1/n) * sum_i w(iou_i) * L_i, where n counts every supplied
    proposal (zero-weight anchors included; they still serve as negatives).
    An empty or singleton batch carries no contrastive signal and returns
    (0.0, zeros).
    """
    n = batch.size
    if n < 2:
        return 0.0, np.zeros_like(batch.raw_features)

    z, norms = _normalized_rows(batch.raw_features)
    tau = config.temperature
    logits = (z @ z.T) / tau
    neg_inf = np.finfo(np.float64).min
    masked = logits.copy()
    np.fill_diagonal(masked, neg_inf)

    row_max = masked.max(axis=1)
    lse = row_max + np.log(np.sum(np.exp(masked - row_max[:, None]), axis=1))
    log_prob = masked - lse[:, None]
    prob = np.exp(log_prob)

    pos_mask = batch.labels[:, None] == batch.labels[None, :]
    np.fill_diagonal(pos_mask, False)
    pos_count = pos_mask.sum(axis=1)

    weights = np.where(batch.ious >= config.iou_floor, 1.0, 0.0)
    has_pos = pos_count > 0
    safe_count = np.maximum(pos_count, 1)
    anchor_losses = np.where(
        has_pos, -np.where(pos_mask, log_prob, 0.0).sum(axis=1) / safe_count, 0.0
    )
    loss = float(np.sum(weights * anchor_losses)) / n

    # dL/d logits: each active anchor's row is softmax - positives/|positives|
    coeff = np.where(has_pos, weights, 0.0) / n
    grad_logits = coeff[:, None] * (prob - pos_mask / safe_count[:, None])
    grad_z = (grad_logits + grad_logits.T) @ z / tau
    # back through row-wise normalization: project out the radial component
    radial = np.sum(grad_z * z, axis=1, keepdims=True)
    grad_features = (grad_z - radial * z) / norms[:, None]
    return loss, grad_features


def select_contrastive_batch(
    pred_classes: np.ndarray,
    gt_classes: np.ndarray,
    ious: np.ndarray,
    features: np.ndarray,
    group: ResemblanceGroup | None,
    mode: Mode,
    background_id: int,
    config: RCLConfig,
) -> tuple[ContrastiveBatch, np.ndarray]:
    """Pick the proposals that enter the contrastive loss for this step.

    GCL keeps every foreground proposal; RCL keeps a foreground proposal
    only when its predicted or ground-truth class intersects the group.
    Background proposals are appended as negatives (always under GCL,
    under RCL when the config says so). Returns the batch plus the indices
    of the selected rows in the original arrays.
    """
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    pred_classes = np.asarray(pred_classes, dtype=np.int64)
    foreground = gt_classes != background_id
    if mode is Mode.RCL:
        gate = np.zeros_like(foreground)
        if group is not None and group:
            members = np.array(sorted(group.classes), dtype=np.int64)
            gate = np.isin(pred_classes, members) | np.isin(gt_classes, members)
        keep_fg = foreground & gate
        keep = keep_fg | (~foreground if config.include_background else False)
        in_group = keep_fg
    else:
        keep = np.ones_like(foreground)
        in_group = np.zeros_like(foreground)
    indices = np.nonzero(keep)[0]
    batch = ContrastiveBatch(
        raw_features=np.asarray(features, dtype=np.float64)[indices],
        labels=gt_classes[indices],
        ious=np.asarray(ious, dtype=np.float64)[indices],
        in_group=in_group[indices],
    )
    return batch, indices
