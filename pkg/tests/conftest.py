import numpy as np
import pytest

from privmask import data, models

DEFAULT_STRUCTURE = data.PlantedStructure(
    identity_features=(0, 1, 2, 3, 4, 5, 6, 7),
    utility_features=(5, 6, 7, 8, 9, 10, 11, 12),
    noise_std=0.25,
)


@pytest.fixture(scope="session")
def planted_dataset():
    return data.gen_synthetic_dual_task(256, 24, 4, 3, DEFAULT_STRUCTURE, seed=42)


@pytest.fixture(scope="session")
def random_dataset():
    return data.gen_random_dataset(200, 12, 5, seed=1)


@pytest.fixture(scope="session")
def small_model():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(120, 6))
    y = (x[:, 0] + x[:, 1] > 1.0).astype(np.int64)
    model = models.train_plain(x, y, models.ModelSpec((8,), "relu"),
                               models.TrainConfig(0.2, 40, 16, seed=3))
    return model, x, y
