import numpy as np
import pytest

from medrobust.imagekit import ImageBuffer
from medrobust.synthetic import probe_set, write_demo_dataset

# index of the disk-on-texture probe used for the SSIM monotonicity checks
TEXTURED_PROBE = 7
RGB_PROBE = 9


@pytest.fixture(scope="session")
def probes():
    return probe_set()


@pytest.fixture(scope="session")
def textured(probes):
    return probes[TEXTURED_PROBE]


@pytest.fixture(scope="session")
def rgb_probe(probes):
    return probes[RGB_PROBE]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def demo_manifests(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    return write_demo_dataset(str(root))


def random_buffer(rng, shape=(16, 16, 1)):
    return ImageBuffer(rng.random(shape))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
