"""Shared fixtures: one toy dataset and one standard training run per session.

The trained checkpoints (500 steps each) back both the pipeline tests and the
acceptance suite, so the expensive runs happen once.
"""

import numpy as np
import pytest

from sqz.audio import make_dataset
from sqz.diffusion import Rng, make_schedule
from sqz.nn import DitConfig, MelDiT
from sqz.spectral import model_mel

SEED = 42
TRAIN_SEED = 7
N_SONGS = 10  # ceil(0.8 * 10) = 8 train songs, 2 test songs
SONG_SECONDS = 6.0
SAMPLE_RATE = 24000


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    return make_dataset(SEED, N_SONGS, SONG_SECONDS, SAMPLE_RATE, root)


@pytest.fixture(scope="session")
def rest_ckpt(toy_manifest):
    from sqz.restoration import RestorationTrainConfig, train_restoration

    cfg = RestorationTrainConfig(steps=500)
    return train_restoration(toy_manifest, (1.0, 4.0, 8.0), cfg, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def comp_ckpt(toy_manifest):
    from sqz.composer import ComposerTrainConfig, train_composer

    cfg = ComposerTrainConfig(steps=500)
    return train_composer(toy_manifest, 4.0, cfg, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def sag_ckpt(toy_manifest):
    from sqz.sag import SagTrainConfig, train_sag

    cfg = SagTrainConfig(steps=500)
    return train_sag(toy_manifest, 4.0, cfg, seed=TRAIN_SEED)


# -- tiny untrained checkpoints for shape/determinism/plumbing tests ----------


def tiny_refiner_config() -> DitConfig:
    return DitConfig(bins=80, cond_bins=80, patch=4, dim=16, depth=1, heads=2, t_dim=16)


@pytest.fixture(scope="session")
def tiny_rest_ckpt():
    from sqz.restoration import PriorCnn, PriorCnnConfig, RestorationCheckpoint

    rng = Rng(100)
    prior = PriorCnn(PriorCnnConfig(hidden=8, depth=1, kernel=3), rng.child("prior"))
    refiner = MelDiT(tiny_refiner_config(), rng.child("refiner"), sigma_data=5.0)
    schedule = make_schedule(8, 80.0 * 5.0, 0.002 * 5.0)
    return RestorationCheckpoint(prior, refiner, schedule, model_mel(SAMPLE_RATE),
                                 (1.0, 4.0, 8.0), 5.0, refine_window=192)


@pytest.fixture(scope="session")
def tiny_comp_ckpt():
    from sqz.composer import ComposerCheckpoint

    cfg = DitConfig(bins=80, cond_bins=81, patch=4, dim=16, depth=1, heads=2, t_dim=16)
    dit = MelDiT(cfg, Rng(101), sigma_data=5.0)
    schedule = make_schedule(8, 80.0 * 5.0, 0.002 * 5.0)
    return ComposerCheckpoint(dit, schedule, model_mel(SAMPLE_RATE), 4.0, 5.0)


@pytest.fixture(scope="session")
def tiny_sag_ckpt():
    from sqz.nn import Linear
    from sqz.sag import SagCheckpoint, SagPriorConfig, SagPriorEncoder

    rng = Rng(102)
    enc_cfg = SagPriorConfig(dim=16, heads=2)
    encoder = SagPriorEncoder(enc_cfg, rng.child("enc"))
    sem_head = Linear(16, 32, rng.child("head"))
    dit_cfg = DitConfig(bins=80, cond_bins=80, patch=4, dim=16, depth=1, heads=2, t_dim=16)
    dit = MelDiT(dit_cfg, rng.child("dit"), sigma_data=5.0)
    schedule = make_schedule(8, 80.0 * 5.0, 0.002 * 5.0)
    return SagCheckpoint(encoder, sem_head, dit, schedule, model_mel(SAMPLE_RATE), 4.0, 5.0)


def loss_curve(history, column: int = None) -> np.ndarray:
    """history rows are (step, *losses); sum the loss columns by default."""
    arr = np.asarray(history, dtype=np.float64)
    if column is None:
        return arr[:, 1:].sum(axis=1)
    return arr[:, column]
