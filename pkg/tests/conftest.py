import os

# determinism reference is a single BLAS thread
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from kdlab import synthdata  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_scenes():
    """A handful of default-size scenes for quick training runs."""
    return synthdata.generate_dataset(12, seed=7)


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    manifest, scenes = synthdata.make_dataset(20, seed=3)
    synthdata.save_dataset(manifest, scenes, str(d))
    return str(d)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
