import numpy as np
import pytest

from isaxsearch import IndexConfig, build_index, random_walks

# verdict lines from test_acceptance.py, echoed in the terminal summary
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_raw():
    return random_walks(6000, 64, seed=21)


@pytest.fixture(scope="session")
def small_cfg():
    # tiny leaves force deep splitting on a small collection
    return IndexConfig(n=64, w=8, leaf_capacity=16, max_bits=8, num_workers=1, chunk_size=500)


@pytest.fixture(scope="session")
def small_index(small_raw, small_cfg):
    return build_index(small_raw, small_cfg)


@pytest.fixture(scope="session")
def small_queries():
    return random_walks(40, 64, seed=22)


@pytest.fixture(scope="session")
def walk_100k():
    return random_walks(100_000, 256, seed=1)


@pytest.fixture(scope="session")
def index_100k(walk_100k):
    return build_index(walk_100k, IndexConfig(n=256, num_workers=2))


def brute_force_nn(raw, q):
    d = np.sqrt(((raw.astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    return i, float(d[i])
