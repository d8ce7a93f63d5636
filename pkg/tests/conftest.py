import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from jpmap.dataio import load_mnist
from jpmap.vae import TrainConfig, VaeModel, load_model, save_model, train_dvae

DATA_DIR = Path(__file__).parent / "data"
MNIST_SUBSET = DATA_DIR / "mnist5k"

# Desk-scale recipe: the full training settings cut to 10 epochs.
DESK_CONFIG = TrainConfig(epochs=10, batch_size=128, lr=1e-4, sigma_dvae=15 / 255, seed=0)


def mnist_dir():
    """A directory with official MNIST files if JPMAP_DATA_DIR has them, else the bundled subset."""
    env = os.environ.get("JPMAP_DATA_DIR")
    if env and any(Path(env).glob("train-images-idx3-ubyte*")):
        return Path(env)
    return MNIST_SUBSET


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist(mnist_dir(), "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist(mnist_dir(), "test")


@pytest.fixture(scope="session")
def desk_model(request, mnist_train):
    """DVAE trained with DESK_CONFIG, cached across sessions in the pytest cache."""
    cache = Path(request.config.cache.mkdir("jpmap"))
    n = min(len(mnist_train), 10_000)
    path = cache / f"desk_{n}_{DESK_CONFIG.epochs}_{DESK_CONFIG.seed}.jvae"
    if path.exists():
        return load_model(path)
    t0 = time.perf_counter()
    model, losses = train_dvae(mnist_train[:n], DESK_CONFIG)
    save_model(model, path)
    info = {"n_train": n, "seconds": time.perf_counter() - t0, "losses": losses}
    path.with_suffix(".json").write_text(json.dumps(info))
    return model


def desk_training_info(request):
    """Training metadata written next to the cached desk model, or None."""
    cache = Path(request.config.cache.mkdir("jpmap"))
    found = sorted(cache.glob("desk_*.json"))
    return json.loads(found[-1].read_text()) if found else None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    """A random 6-pixel, 2-latent VAE with small hidden layers."""
    return VaeModel.create(6, 2, hidden=(5, 4), rng=np.random.default_rng(7), gamma2=0.3, sigma_dvae=0.1)
