from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from detlab import detsim, trainer
from detlab.model import DetectionModel


@pytest.fixture(scope="session")
def default_world() -> detsim.SyntheticDataset:
    return detsim.generate_dataset(detsim.DatasetConfig())


@pytest.fixture(scope="session")
def pretrained(default_world) -> DetectionModel:
    """Base-pretrained model on the default world; copy() before mutating."""
    ds = default_world
    catalog = ds.catalog()
    cfg = replace(
        trainer.TrainConfig(seed=0),
        total_iterations=2000,
        contrastive_mode=trainer.MODE_NONE,
    )
    net = DetectionModel(
        ds.config.embed_dim, ds.config.num_classes, rng=np.random.default_rng([0, 7])
    )
    trainer.run_base_pretrain(net, ds.splits["base_train"], cfg, catalog)
    return net


def make_small_model(seed: int = 0, input_dim: int = 6, num_classes: int = 4) -> DetectionModel:
    return DetectionModel(
        input_dim=input_dim,
        num_classes=num_classes,
        hidden_dim=10,
        con_dim=5,
        rng=np.random.default_rng(seed),
    )
