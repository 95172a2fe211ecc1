import numpy as np
import pytest

from modules.datagen import feature_view, generate_synthetic, partition_iid
from modules.orchestrator import build_environment
from modules.run_config import build_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """A run small enough to finish in well under a second per round."""
    return build_config({
        "method": "ecct",
        "feature_setting": "CandF",
        "num_devices": 4,
        "rounds": 4,
        "cloud_epochs": 2,
        "batch_size": 16,
        "progress": False,
        "save_checkpoints": False,
        "data": {"num_classes": 3, "num_samples": 240, "fed_dim": 3, "cen_dim": 5},
        "architecture": {
            "embedding_dim": 4,
            "edge_encoder_widths": [8],
            "edge_classifier_widths": [8],
            "cloud_encoder_widths": [8],
            "cloud_classifier_widths": [8],
            "hetero_width_choices": [4, 8],
        },
        "loss": {"two_stage_switch_round": 2},
        "transfer": {"buffer_capacity": 8},
    })


@pytest.fixture
def tiny_env(tiny_cfg):
    return build_environment(tiny_cfg)


@pytest.fixture
def small_dataset():
    return generate_synthetic(num_classes=3, num_samples=120, fed_dim=2, cen_dim=3, seed=7)


@pytest.fixture
def small_partition(small_dataset):
    return partition_iid(small_dataset, 3, seed=7)


@pytest.fixture
def candf_view(small_dataset):
    return feature_view(small_dataset, "CandF")
