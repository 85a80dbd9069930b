import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from foresee.model import ForeseeModel, ModelConfig  # noqa: E402
from foresee.synthetic import SyntheticSceneConfig, generate_synthetic_dataset  # noqa: E402

TOY = ModelConfig(input_dim=8, hidden_size=4, num_layers=2, seq_len=3)


def small_scene(**kw):
    base = dict(num_videos=4, frames_per_video=24, height=8, width=8, sprite_size_min=2,
                sprite_size_max=3, num_sprites=2, split_ratios=(2.0, 1.0, 1.0))
    base.update(kw)
    return SyntheticSceneConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model():
    return ForeseeModel.init(TOY, seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def small_videos():
    return generate_synthetic_dataset(small_scene())


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
