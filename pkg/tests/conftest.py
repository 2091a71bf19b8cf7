import numpy as np
import pytest
import torch

from csdt.network import NetworkConfig
from csdt.synthgen import DatasetConfig, render_scene, sample_scene
from csdt.trainer import TrainConfig, TrainData

TINY_NET = NetworkConfig(base_channels=4, depths=2)


def _scenes(rng, cfg, n):
    out = [render_scene(sample_scene(rng, cfg)) for _ in range(n)]
    x = np.stack([s.image for s in out]).astype(np.float32)[:, None]
    y = np.stack([s.mask for s in out]).astype(np.float32)[:, None]
    return torch.from_numpy(x), torch.from_numpy(y)


@pytest.fixture(scope="session")
def tiny_data():
    """In-memory 64x64 stripes: 4 labeled, 12 unlabeled, 4 validation."""
    rng = np.random.default_rng(0)
    cfg = DatasetConfig(image_size=(64, 64), peak_range=(0.3, 0.6))
    lx, ly = _scenes(rng, cfg, 4)
    ux, _ = _scenes(rng, cfg, 12)
    vx, vy = _scenes(rng, cfg, 4)
    return TrainData(lx, ly, ux, vx, vy)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        batch_labeled=2,
        batch_unlabeled=2,
        max_iterations=6,
        pretrain_iterations=3,
        val_every=3,
        checkpoint_every=3,
        network=TINY_NET,
        seed=0,
    )


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
