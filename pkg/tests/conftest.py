import numpy as np
import pytest

from demoforge.episode import Episode


def make_episode(states, episode_id="ep", dt=0.05, task_id="pick_place-0000", actions=None):
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 1:
        states = states[:, None]
    if actions is None:
        actions = np.zeros_like(states)
    return Episode(episode_id=episode_id, task_id=task_id, instruction="test",
                   states=states, actions=actions, dt=dt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------------
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
ACCEPTANCE_TOTAL = 11


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line; the test then asserts ``ok``."""
    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_TOTAL + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:>2}: NOT RUN")
