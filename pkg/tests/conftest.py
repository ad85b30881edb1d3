import numpy as np
import pytest

from aprlab.data import Dataset, default_ml100k_path, load_interactions


def make_dataset(rows, num_users=None, num_items=None):
    """Dataset from ``(user, item)`` or ``(user, item, timestamp)`` tuples."""
    rows = [tuple(r) for r in rows]
    users = np.array([r[0] for r in rows], dtype=np.int64)
    items = np.array([r[1] for r in rows], dtype=np.int64)
    ts = np.array([r[2] if len(r) > 2 else n for n, r in enumerate(rows)], dtype=np.int64)
    M = num_users if num_users is not None else int(users.max()) + 1
    N = num_items if num_items is not None else int(items.max()) + 1
    return Dataset(M, N, users, items, np.ones(len(rows)), ts)


def random_dataset(rng, M, N, density=0.4):
    """Every user gets at least two and at most N - 1 positives."""
    rows = []
    t = 0
    for u in range(M):
        n = int(np.clip(rng.binomial(N, density), 2, N - 1))
        for i in rng.choice(N, size=n, replace=False):
            rows.append((u, int(i), t))
            t += 1
    return make_dataset(rows, M, N)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ml100k():
    path = default_ml100k_path()
    if path is None or not path.exists():
        pytest.skip("ML100K ratings file not available (run scripts/fetch_ml100k.py or set APRLAB_ML100K)")
    return load_interactions(path)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0].split("-")[1])):
            terminalreporter.write_line(line)
