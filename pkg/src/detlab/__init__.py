"""Desk-scale few-shot detection laboratory with refined contrastive training."""

__version__ = "0.1.0"

from .contrastive import ContrastiveBatch, RCLConfig, anchor_weight, per_anchor_loss, rcl_loss
from .detsim import Box, DatasetConfig, Proposal, Scene, generate_dataset, iou
from .model import DetectionModel, freeze_policy
from .resemblance import (
    ClassCatalog,
    MilestoneSchedule,
    Mode,
    PairCounter,
    ResemblanceGroup,
    ResemblancePair,
    materialize_group,
)
from .trainer import TrainConfig, run_base_pretrain, run_finetune

__all__ = [
    "Box",
    "ClassCatalog",
    "ContrastiveBatch",
    "DatasetConfig",
    "DetectionModel",
    "MilestoneSchedule",
    "Mode",
    "PairCounter",
    "Proposal",
    "RCLConfig",
    "ResemblanceGroup",
    "ResemblancePair",
    "Scene",
    "TrainConfig",
    "anchor_weight",
    "freeze_policy",
    "generate_dataset",
    "iou",
    "materialize_group",
    "per_anchor_loss",
    "rcl_loss",
    "run_base_pretrain",
    "run_finetune",
]
