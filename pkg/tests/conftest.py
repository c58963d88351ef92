import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cellstream import synthcells as sc  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture(scope="session")
def tiny_config():
    """Small but valid generator settings for fast end-to-end tests."""
    return sc.GeneratorConfig(n_videos=10, n_frames=6, height=32, width=32,
                              population=sc.PopulationSpec(rbc_mean=300, rbc_std=20, wbc_mean=12, wbc_std=5))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("tiny")
    manifest = sc.generate_dataset(tiny_config, out)
    return out, manifest


# -- acceptance verdicts -----------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def verdict(capsys):
    """Record one acceptance criterion; the line is echoed now and in the final summary."""

    def record(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
