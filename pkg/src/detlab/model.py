"""Trainable toy detector: shared ReLU encoder plus four linear heads.

The encoder maps proposal features to a hidden representation consumed by
the classification, box-regression, objectness, and contrastive-projection
heads. Gradients are accumulated per head and chained through the shared
encoder by hand; there is no autodiff.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numeric import NumericError, Param, check_finite

CHECKPOINT_FORMAT = "detlab-checkpoint"
CHECKPOINT_VERSION = 1

STAGE_BASE_PRETRAIN = "base-pretrain"
STAGE_FINETUNE = "finetune"


@dataclass
class ForwardOutput:
    """Head outputs for a single proposal feature."""

    cls_logits: np.ndarray
    box_deltas: np.ndarray
    objectness_logit: float
    contrastive_feature: np.ndarray


@dataclass
class BatchForward:
    """Head outputs for a feature batch, with cached activations for backward."""

    inputs: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    cls_logits: np.ndarray
    box_deltas: np.ndarray
    objectness_logits: np.ndarray
    contrastive_features: np.ndarray


class DetectionModel:
    """Encoder (input_dim -> hidden, ReLU) with four parallel linear heads."""

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        hidden_dim: int = 64,
        con_dim: int = 16,
        rng: np.random.Generator | None = None,
    ) -> None:
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.hidden_dim = hidden_dim
        self.con_dim = con_dim
        rng = rng if rng is not None else np.random.default_rng(0)

        def init(name: str, fan_in: int, shape: tuple[int, ...]) -> Param:
            bound = 1.0 / np.sqrt(fan_in)
            return Param.create(name, rng.uniform(-bound, bound, shape))

        self.encoder_w = init("encoder_w", input_dim, (input_dim, hidden_dim))
        self.encoder_b = init("encoder_b", input_dim, (hidden_dim,))
        self.cls_w = init("cls_w", hidden_dim, (hidden_dim, num_classes + 1))
        self.cls_b = init("cls_b", hidden_dim, (num_classes + 1,))
        self.box_w = init("box_w", hidden_dim, (hidden_dim, 4))
        self.box_b = init("box_b", hidden_dim, (4,))
        self.obj_w = init("obj_w", hidden_dim, (hidden_dim,))
        self.obj_b = init("obj_b", hidden_dim, (1,))
        self.con_w = init("con_w", hidden_dim, (hidden_dim, con_dim))
        self.con_b = init("con_b", hidden_dim, (con_dim,))

    @property
    def params(self) -> list[Param]:
        return [
            self.encoder_w, self.encoder_b,
            self.cls_w, self.cls_b,
            self.box_w, self.box_b,
            self.obj_w, self.obj_b,
            self.con_w, self.con_b,
        ]

    @property
    def encoder_params(self) -> list[Param]:
        return [self.encoder_w, self.encoder_b]

    @property
    def head_params(self) -> list[Param]:
        return [p for p in self.params if p not in self.encoder_params]

    def forward_batch(self, features: np.ndarray) -> BatchForward:
        x = check_finite(features, "features")
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise NumericError(
                f"expected (n, {self.input_dim}) features, got {x.shape}"
            )
        hidden_pre = x @ self.encoder_w.value + self.encoder_b.value
        hidden = np.maximum(hidden_pre, 0.0)
        return BatchForward(
            inputs=x,
            hidden_pre=hidden_pre,
            hidden=hidden,
            cls_logits=hidden @ self.cls_w.value + self.cls_b.value,
            box_deltas=hidden @ self.box_w.value + self.box_b.value,
            objectness_logits=hidden @ self.obj_w.value + self.obj_b.value[0],
            contrastive_features=hidden @ self.con_w.value + self.con_b.value,
        )

    def forward(self, feature: np.ndarray) -> ForwardOutput:
        fwd = self.forward_batch(np.asarray(feature, dtype=np.float64)[None, :])
        return ForwardOutput(
            cls_logits=fwd.cls_logits[0],
            box_deltas=fwd.box_deltas[0],
            objectness_logit=float(fwd.objectness_logits[0]),
            contrastive_feature=fwd.contrastive_features[0],
        )

    def backward(
        self,
        fwd: BatchForward,
        grad_cls: np.ndarray | None = None,
        grad_box: np.ndarray | None = None,
        grad_obj: np.ndarray | None = None,
        grad_con: np.ndarray | None = None,
    ) -> None:
        """Accumulate parameter gradients from per-head output gradients.

        The shared-encoder gradient is the sum of the chained head terms, so
        calling once per loss term or once with all terms is equivalent.
        """
        n = fwd.inputs.shape[0]
        grad_hidden = np.zeros((n, self.hidden_dim))
        if grad_cls is not None:
            self.cls_w.grad += fwd.hidden.T @ grad_cls
            self.cls_b.grad += grad_cls.sum(axis=0)
            grad_hidden += grad_cls @ self.cls_w.value.T
        if grad_box is not None:
            self.box_w.grad += fwd.hidden.T @ grad_box
            self.box_b.grad += grad_box.sum(axis=0)
            grad_hidden += grad_box @ self.box_w.value.T
        if grad_obj is not None:
            self.obj_w.grad += fwd.hidden.T @ grad_obj
            self.obj_b.grad += grad_obj.sum()
            grad_hidden += np.outer(grad_obj, self.obj_w.value)
        if grad_con is not None:
            self.con_w.grad += fwd.hidden.T @ grad_con
            self.con_b.grad += grad_con.sum(axis=0)
            grad_hidden += grad_con @ self.con_w.value.T
        grad_pre = grad_hidden * (fwd.hidden_pre > 0.0)
        self.encoder_w.grad += fwd.inputs.T @ grad_pre
        self.encoder_b.grad += grad_pre.sum(axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise NumericError(
                    f"shape mismatch for {p.name}: {value.shape} vs {p.value.shape}"
                )
            p.value = value.copy()
            p.grad = np.zeros_like(value)
            p.momentum_buf = np.zeros_like(value)

    def copy(self) -> "DetectionModel":
        clone = DetectionModel(
            self.input_dim, self.num_classes, self.hidden_dim, self.con_dim
        )
        clone.load_state_dict(self.state_dict())
        return clone


def freeze_policy(model: DetectionModel, stage: str) -> list[Param]:
    """Trainable parameters per stage: everything for base pre-training,
    heads only (encoder frozen) for fine-tuning."""
    if stage == STAGE_BASE_PRETRAIN:
        return model.params
    if stage == STAGE_FINETUNE:
        return model.head_params
    raise ValueError(f"unknown stage {stage!r}")


def save_checkpoint(model: DetectionModel, path: str | Path) -> None:
    """JSON weight dump; float repr round-trips bit-exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": {
            "input_dim": model.input_dim,
            "num_classes": model.num_classes,
            "hidden_dim": model.hidden_dim,
            "con_dim": model.con_dim,
        },
        "params": {
            p.name: {"shape": list(p.value.shape), "data": p.value.ravel().tolist()}
            for p in model.params
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path: str | Path) -> DetectionModel:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    dims = payload["dims"]
    model = DetectionModel(
        input_dim=dims["input_dim"],
        num_classes=dims["num_classes"],
        hidden_dim=dims["hidden_dim"],
        con_dim=dims["con_dim"],
    )
    state = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    model.load_state_dict(state)
    return model
