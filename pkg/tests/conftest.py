import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from lrdistill import tensor as T  # noqa: E402
from lrdistill.data import load_images, load_manifest, read_teacher_store, synth_generate  # noqa: E402
from lrdistill.model import ModelConfig  # noqa: E402

DATA = os.path.join(os.path.dirname(__file__), "data")

# narrow architecture for fast training tests
TINY = ModelConfig(conv_channels=(8, 16), gen_feature_dim=512, head_hidden=32, embed_dim=512, teacher_dim=512,
                   relation_hidden=16, relation_dim=8, proj_dim=8)


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(scope="session")
def tiny_fixture(tmp_path_factory):
    """5 classes x 12 samples, last 4 of each class held out."""
    out = tmp_path_factory.mktemp("fixture")
    synth_generate(5, 12, 7, str(out), test_per_class=4)
    return str(out)


@pytest.fixture(scope="session")
def tiny_data(tiny_fixture):
    train = load_images(load_manifest(os.path.join(tiny_fixture, "train_manifest.json")))
    test = load_images(load_manifest(os.path.join(tiny_fixture, "test_manifest.json")))
    gen = read_teacher_store(os.path.join(tiny_fixture, "gen_teacher.gten"))
    disc = read_teacher_store(os.path.join(tiny_fixture, "disc_teacher.gten"))
    return train, test, gen, disc


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
