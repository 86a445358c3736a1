import numpy as np
import pytest

from skyreid.synth import SynthConfig, generate_dataset
from skyreid.trainer import TrainConfig

TINY_SYNTH = SynthConfig(
    num_identities=4,
    tracklets_per_cell=1,
    frames_per_tracklet=4,
    height=28,
    width=14,
    seed=7,
)

TINY_TRAIN = TrainConfig(
    ids_per_batch=2,
    tracklets_per_id=2,
    frames_per_tracklet=4,
    image_height=28,
    image_width=14,
    patch_size=14,
    dim=16,
    depth=1,
    heads=2,
    epochs=2,
    warmup_iters=2,
    decay_epochs=(1,),
    seed=0,
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 small tracklets: 4 identities x 2 platforms x 2 sessions."""
    out = tmp_path_factory.mktemp("tiny_data")
    records = generate_dataset(TINY_SYNTH, out)
    return out, records


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
