import numpy as np
import pytest

from see_classifiers.data import SyntheticSpec, generate_synthetic, split
from see_classifiers.model import ArchitectureSpec, assemble
from see_classifiers.trainer import TrainConfig, train


def small_spec(n_early=2, channels=2, length=48, classes=3, **kw):
    """Narrow 3-layer trunk; cheap enough for finite differences."""
    layers = [(1,), (1, 2)][n_early - 1] if n_early else ()
    fractions = [(0.5,), (0.4, 0.7)][n_early - 1] if n_early else ()
    base = dict(trunk_channels=(3, 4, 4), fc_hidden=6, head_filters=2)
    base.update(kw)
    return ArchitectureSpec.build(channels, length, classes, layers, fractions, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_splits():
    ds = generate_synthetic(SyntheticSpec(n_per_class=60, seed=3))
    return split(ds, 0.6, seed=3)


@pytest.fixture(scope="session")
def trained_cnn(synthetic_splits):
    train_set, _ = synthetic_splits
    spec = ArchitectureSpec.build(4, 128, 6, (2, 3), (0.4, 0.7), (0.3, 0.3))
    model = assemble(spec, seed=5)
    train(model, train_set, TrainConfig(epochs=8, learning_rate=3e-3, seed=5))
    return model
