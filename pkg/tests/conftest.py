import dataclasses

import pytest

from relisten.config import RunConfig
from relisten.dataset import build_dataset
from relisten.synth import PROFILES, SynthProfile, generate

SMALL = RunConfig(
    L=4, step=2, d=8, B=1, H=2, n_test=1, n_val=1, epochs=3, batch_size=8, lr=0.01, patience=0, n_top=5
)


def small_dataset(config: RunConfig = SMALL, profile: SynthProfile | None = None):
    profile = profile or dataclasses.replace(PROFILES["tiny"], n_users=4, n_sessions=12, n_songs=80)
    return build_dataset(generate(profile), config)


@pytest.fixture(scope="session")
def small():
    return small_dataset()


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
