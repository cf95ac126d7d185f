import numpy as np
import pytest

from cilbench import datagen
from cilbench.binpack import SOLVERS, Instance


def fake_dataset(per_class, seed=0, length=120):
    """Plumbing-only dataset: random items with assigned (unverified) labels.

    Each class gets a shifted item distribution so a network can learn it.
    """
    rng = np.random.default_rng(seed)
    entries = []
    for s in SOLVERS:
        lo = 20 + 15 * int(s)
        for j in range(per_class):
            items = tuple(rng.integers(lo, lo + 36, size=length).tolist())
            entries.append(datagen.Entry(Instance(f"{s.name}{j:05d}", items), s, (0.0, 0.0, 0.0, 0.0)))
    return datagen.LabeledDataset(entries, datagen.Meta(length=length))


@pytest.fixture(scope="session")
def small_real():
    return datagen.generate_balanced(5, seed=3, founders=2)


@pytest.fixture(scope="session")
def fake120():
    return fake_dataset(120, seed=1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
