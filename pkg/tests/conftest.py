import numpy as np
import pytest

from slimnic import codec as C
from slimnic import data
from slimnic.trainer import TrainConfig, train

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_model():
    return C.build_model(seed=0)


@pytest.fixture(scope="session")
def train_images():
    return data.to_tensor(data.load_images("synthetic:1:16:64"))


@pytest.fixture(scope="session")
def holdout_images():
    return data.to_tensor(data.load_images("synthetic:2:4:64"))


@pytest.fixture(scope="session")
def short_trained(train_images, holdout_images):
    """A desk model after a short dense run; shared read-only across tests."""
    model = C.build_model(seed=0)
    report = train(model, train_images, TrainConfig(gamma=0.0, steps=150, seed=0), holdout_images)
    return model, report


def random_masks(model, rng, p_off=0.4):
    """Random {0,1} masks per slot with at least one channel kept."""
    out = {}
    for sid, width in model.slot_widths().items():
        m = (rng.random(width) >= p_off).astype(np.float32)
        if not m.any():
            m[rng.integers(width)] = 1.0
        out[sid] = m
    return out


def set_alphas(model, masks):
    for sid, vec in model.mask_slots():
        vec.param.data = np.where(masks[sid] > 0, 0.5, -0.5).astype(np.float32)
