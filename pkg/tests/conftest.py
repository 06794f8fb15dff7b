import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

DATA = Path(__file__).resolve().parents[1] / "data"

# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_paths():
    paths = {
        "train_images": DATA / "mnist5k-train-images-idx3-ubyte.gz",
        "train_labels": DATA / "mnist5k-train-labels-idx1-ubyte.gz",
        "test_images": DATA / "mnist5k-test-images-idx3-ubyte.gz",
        "test_labels": DATA / "mnist5k-test-labels-idx1-ubyte.gz",
    }
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        pytest.skip(f"dataset files missing: {missing}")
    return {k: str(v) for k, v in paths.items()}
