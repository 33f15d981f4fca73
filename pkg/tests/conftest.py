import pytest

from mrreparam.phantom import generate_phantom
from mrreparam.sim import build_dataset


@pytest.fixture(scope="session")
def tiny_phantoms():
    return [generate_phantom(s, shape=(24, 32, 32)) for s in (0, 1)]


@pytest.fixture(scope="session")
def tiny_datasets(tmp_path_factory, tiny_phantoms):
    """Small D2P and P2P datasets at R=8 (depth-3 models)."""
    root = tmp_path_factory.mktemp("tiny")
    out = {}
    for mode in ("d2p", "p2p"):
        build_dataset(tiny_phantoms, mode, 6, 4, 8, 0, root / mode, n_train=16)
        out[mode] = root / mode / "manifest.json"
    return out


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, then assert."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"ACCEPTANCE {number} {name}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
