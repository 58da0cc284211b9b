import numpy as np
import pytest

from jule3d.volume import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_volume(shape, value=1000, seed=None):
    """Constant volume, or uniform noise in [0, 4000) when ``seed`` is given."""
    if seed is None:
        return Volume(np.full(shape, value, dtype=np.uint16))
    gen = np.random.default_rng(seed)
    return Volume(gen.integers(0, 4000, shape).astype(np.uint16))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
