import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from gradedit.zoo import (  # noqa: E402
    ARCHITECTURES,
    SyntheticDatasetConfig,
    TrainConfig,
    build_model,
    make_synthetic_dataset,
    train_classifier,
)

SHAPE = (3, 16, 16)


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic_dataset(SyntheticDatasetConfig(num_classes=10, samples_per_class=30, image_size=SHAPE, seed=3))


@pytest.fixture(scope="session")
def trained_zoo(small_data):
    """Every architecture trained briefly on the small dataset (smooth enough for gradient checks)."""
    train, test = small_data
    models = {}
    for i, arch in enumerate(ARCHITECTURES):
        model = build_model(arch, 10, SHAPE, seed=i)
        models[arch], _ = train_classifier(model, train, test, TrainConfig(epochs=3, batch_size=32, learning_rate=2e-3))
    return models


@pytest.fixture(scope="session")
def surrogate(trained_zoo):
    return trained_zoo["small_cnn_a"]


@pytest.fixture
def batch(small_data):
    _, test = small_data
    return test.data[:8].clone(), test.labels[:8].clone()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
