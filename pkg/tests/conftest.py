import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hsi_fewshot.config import RunConfig  # noqa: E402
from hsi_fewshot.scene_store import HsiScene  # noqa: E402
from hsi_fewshot.synthetic import make_synthetic_pair  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_pair():
    return make_synthetic_pair(seed=0)


@pytest.fixture
def tiny_scene():
    rng = np.random.default_rng(3)
    labels = np.zeros((12, 12), dtype=np.int64)
    labels[:6, :6] = 1
    labels[:6, 6:] = 2
    labels[6:, :6] = 3
    labels[9:, 9:] = 0
    return HsiScene(rng.random((12, 12, 5)), labels, ["a", "b", "c"], "tiny")


def small_config(**sections) -> RunConfig:
    """Cheap configuration for tests: 36 mapped bands, 4 queries per class."""
    data = {
        "network": {"mapped_bands": 36, "disc_hidden": 64},
        "sampler": {"train_queries_per_class": 4},
        "train": {"episodes": 4, "checkpoint_every": 2},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return RunConfig.from_dict(data)


@pytest.fixture
def make_config():
    return small_config


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record and print one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
