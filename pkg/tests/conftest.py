from __future__ import annotations

import numpy as np
import pytest

from hybridivf.index import build_index, open_index
from hybridivf.oracle import synthetic_arrays

# Shared 20k configuration used by the acceptance criteria.
N, D, M, K = 20_000, 64, 4, 141
SEED = 7

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dataset_20k():
    return synthetic_arrays(N, D, M, seed=SEED)


@pytest.fixture(scope="session")
def index_20k_dir(tmp_path_factory, dataset_20k):
    vectors, attrs = dataset_20k
    out = tmp_path_factory.mktemp("idx20k")
    build_index(vectors, attrs, out, metric="cosine", k=K, seed=SEED)
    return out


@pytest.fixture(scope="session")
def index_20k(index_20k_dir):
    return open_index(index_20k_dir)


@pytest.fixture
def small_data():
    rng = np.random.default_rng(3)
    vectors = rng.standard_normal((600, 8)).astype(np.float32)
    attrs = rng.integers(-5, 6, size=(600, 3))
    return vectors, attrs


@pytest.fixture
def small_index(tmp_path, small_data):
    vectors, attrs = small_data
    build_index(vectors, attrs, tmp_path / "idx", metric="euclidean", k=10, seed=1)
    return tmp_path / "idx"
