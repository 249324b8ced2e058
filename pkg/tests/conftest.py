import pytest

from collabseg.backbone import TINY_CHANNELS
from collabseg.data import make_synthetic_dataset
from collabseg.trainer import TrainConfig


def tiny_config(**overrides):
    """Desk-scale training config used across the trainer and CLI tests."""
    base = dict(
        image_size=64,
        backbone_channels=TINY_CHANNELS,
        decoder_width=8,
        batch_size=2,
        epochs=1,
        checkpoint_every=100,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory):
    """Four 64x64 synthetic samples with thick scribbles; shared read-only."""
    root = tmp_path_factory.mktemp("synth")
    records = make_synthetic_dataset(root, n=4, size=64, seed=0, thickness=3)
    return root, records
