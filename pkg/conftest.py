import pytest

from connlearn.config import TrainConfig
from connlearn.signals import synth_generate


@pytest.fixture
def small_dataset():
    """8 labeled subjects, 6 regions, 40 timepoints."""
    return synth_generate(8, 6, 40, seed=3, name="small")


@pytest.fixture
def tiny_config():
    return TrainConfig(
        iterations=1, heads=2, states=2, hidden=4, classifier_hidden=4,
        epochs=2, finetune_epochs=2, batch_size=4, te_bins=3, lr=1e-2, folds=2,
    )
