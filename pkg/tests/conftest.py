import numpy as np
import pytest
from hypothesis import settings

from fundusfuse import data

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    """A small 32 x 32 synthetic dataset, 4 images per class and split."""
    root = tmp_path_factory.mktemp("fixture")
    data.generate_fixture(root, per_class=4, seed=0, size=32, force=True)
    return root


def pytest_terminal_summary(terminalreporter):
    """Print the one-line verdict of every acceptance criterion that ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
