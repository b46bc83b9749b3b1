import numpy as np
import pytest

from semsat.dataset import export_dataset, load_dataset
from semsat.field import FieldConfig
from semsat.synth import generate_scene
from semsat.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "town"
    export_dataset(generate_scene(0, "town", grid=24), 5, root, size=16)
    return root


@pytest.fixture(scope="session")
def parking_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("park") / "parking_lot"
    export_dataset(generate_scene(3, "parking_lot", grid=24), 5, root, size=16)
    return root


@pytest.fixture
def tiny_ds(tiny_data):
    return load_dataset(tiny_data)


def tiny_config(**overrides):
    base = dict(iterations=12, batch_size=64, n_samples=8, lr=2e-3, lr_decay=0.97,
                checkpoint_every=5, log_every=1,
                field=FieldConfig.desk(backbone_width=16, semantic_hidden=8, head_hidden=8,
                                       pe_levels_position=3))
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
