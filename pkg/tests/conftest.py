from pathlib import Path

import pytest

from pfode.cli import main

ROOT = Path(__file__).resolve().parents[1]
DEMO_CONFIG = ROOT / "configs" / "demo.cfg"
GOLDEN = Path(__file__).resolve().parent / "golden"
PIPELINE = ("phantom-gen", "template", "fit-denoiser", "reconstruct", "anomaly", "score", "evaluate")


def run_cli(*args) -> int:
    return main([str(a) for a in args])


@pytest.fixture(scope="session")
def demo_work(tmp_path_factory):
    """The demo config run through every pipeline command once per session."""
    work = tmp_path_factory.mktemp("demo") / "work"
    for cmd in PIPELINE:
        assert run_cli(cmd, "--config", DEMO_CONFIG, "--out", work) == 0, cmd
    return work


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
