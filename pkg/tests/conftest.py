import numpy as np
import pytest

from engine.tensor import backward
from synth.dataset import make_dataset
from synth.scene import DatasetConfig
from utils.data_model import BackboneConfig, BlockSpec, ModelMode, OptimizerKind, RunConfig

# Pre-activations closer than this to zero make central differences straddle a ReLU kink
KINK_MARGIN = 1e-3

# Nonzero gradients smaller than this drown in central-difference round-off
GRAD_MARGIN = 1e-5


def has_tiny_gradient(loss_fn, params) -> bool:
    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    g = np.concatenate([np.abs(p.grad).reshape(-1) for p in params.values()])
    return bool(np.any((g > 0.0) & (g < GRAD_MARGIN)))


def tiny_backbone(**overrides) -> BackboneConfig:
    """Two single-layer blocks; every adaptor rank up to 5 is admissible"""
    fields = dict(
        in_channels=2,
        num_classes=2,
        blocks=[BlockSpec(4, layers=1), BlockSpec(8, layers=1)],
        taps={"P3": 0, "P5": 1},
        rank=2,
    )
    fields.update(overrides)
    return BackboneConfig(**fields)


def tiny_dataset_config(**overrides) -> DatasetConfig:
    fields = dict(
        height=8, width=8, channels=2, num_classes=2,
        samples={"train": 16, "val": 8}, seed=3, profile="default",
    )
    fields.update(overrides)
    return DatasetConfig(**fields)


def tiny_run_config(dataset_path: str, **overrides) -> RunConfig:
    fields = dict(
        dataset_path=dataset_path,
        backbone=tiny_backbone(),
        mode=ModelMode.LMA_ADAPTIVE,
        r_init=3,
        r_target=2,
        epochs=4,
        warmup_epochs=1,
        decay_end_epoch=2,
        batch_size=8,
        learning_rate=0.05,
        prune_interval=1,
        optimizer=OptimizerKind.SGD,
        seed=0,
        quiet=True,
    )
    fields.update(overrides)
    return RunConfig(**fields)


@pytest.fixture
def backbone():
    return tiny_backbone()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dataset_dir(tmp_path):
    out = tmp_path / "data"
    make_dataset(tiny_dataset_config(), str(out), quiet=True)
    return out


@pytest.fixture
def run_config(dataset_dir):
    return tiny_run_config(str(dataset_dir))
