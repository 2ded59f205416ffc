import numpy as np
import pytest

from dfr.harness.config import TrainConfig


def tiny_config(**changes) -> TrainConfig:
    """A configuration small enough to train in a couple of seconds."""
    base = dict(
        iterations=6, way=3, shot=1, queries=2, lr=0.002, image_size=16,
        cls_channels=(4, 6, 8, 8), var_channels=4, mlp_hidden=8, relation_channels=4, relation_hidden=3,
        num_classes=12, samples_per_class_per_domain=6, split_counts=(6, 2, 4), rho_train=0.8,
        pairs_per_sample=2,
    )
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(autouse=True)
def _single_worker(monkeypatch):
    monkeypatch.delenv("DFR_NUM_WORKERS", raising=False)
    np.seterr(all="warn")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    def emit(line: str) -> None:
        ACCEPTANCE_LINES.append(line)
        print(line)

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
