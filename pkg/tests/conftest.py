import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cleegn.data import SynthSpec, synth_subject  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria")


@pytest.fixture(scope="session")
def small_dataset():
    """Four short synthetic subjects (C=4, fs=64, 90 s)."""
    ds = {}
    for seed in range(4):
        noisy, clean = synth_subject(SynthSpec(n_channels=4, fs=64.0, duration_sec=90.0, seed=seed))
        ds[noisy.subject_id] = (noisy, clean)
    return ds


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
