import numpy as np
import pytest

from homographyad.synthesis import ToySpec, generate_toy_dataset


@pytest.fixture(scope="session")
def tiny_toy(tmp_path_factory):
    """Three-class toy dataset at 64 px with a handful of images per split."""
    spec = ToySpec(size=64, n_train=8, n_test_good=4, n_test_defect=6)
    return generate_toy_dataset(spec, tmp_path_factory.mktemp("toy") / "dataset", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def report(request):
    """``report(n, ok, detail)`` records a criterion line and fails the test when ``ok`` is false."""
    lines = request.config.stash[_ACCEPTANCE]

    def _report(n, ok, detail=""):
        lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip())
        assert ok, f"criterion {n}: {detail}"

    _report.skip = lambda n, reason: (lines.append(f"criterion {n}: SKIP  {reason}"), pytest.skip(reason))
    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
