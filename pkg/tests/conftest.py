import numpy as np
import pytest

from blockprune.data import GenerationSpec, generate_dataset
from blockprune.model import ModelConfig, init_checkpoint


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(b=4, m=2, d=6, d_e=4, n_rbf=4, cutoff=1.6, species_count=3, seed=3)


@pytest.fixture(scope="session")
def small_ckpt(small_config):
    return init_checkpoint(small_config)


@pytest.fixture(scope="session")
def upstream():
    return generate_dataset(GenerationSpec(count=40, seed=11))


@pytest.fixture(scope="session")
def downstream():
    return generate_dataset(GenerationSpec(count=40, seed=11, task="downstream"))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
