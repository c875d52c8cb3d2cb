import numpy as np
import pytest

from dualcrack.autodiff import Tensor
from dualcrack.synth import synth_cracks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_cracks(root, seed=3, count=6, split="train")
    synth_cracks(root, seed=3, count=3, split="test")
    return root


def leaf(arr, dtype=np.float64):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, dtype=dtype)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
