import numpy as np
import pytest

from learnloop.diagnosis import NcdModel, TrainConfig
from learnloop.ingest import QMatrix, ResponseDataset, ResponseRecord


@pytest.fixture
def small_q():
    return QMatrix(rows=[{0}, {1}, {2}, {3}, {0, 1}, {1, 2}, {0, 3}, {2, 3}])


@pytest.fixture
def small_model(small_q):
    cfg = TrainConfig(epochs=2, hidden_sizes=(8, 6), seed=7)
    return NcdModel.initialize(6, len(small_q.rows), 4, cfg)


@pytest.fixture
def small_dataset(small_q):
    rng = np.random.default_rng(11)
    records = []
    counters = {}
    for _ in range(60):
        s = int(rng.integers(6))
        q = int(rng.integers(len(small_q.rows)))
        order = counters.get(s, 0)
        counters[s] = order + 1
        records.append(ResponseRecord(s, q, int(rng.integers(2)), order))
    records.sort(key=lambda r: (r.student_id, r.order_index))
    return ResponseDataset(records, 6, len(small_q.rows), 4)


def make_model(seed: int, n_students=6, n_items=8, n_knowledge=4,
               hidden=(8, 6)) -> NcdModel:
    cfg = TrainConfig(epochs=1, hidden_sizes=hidden, seed=seed)
    return NcdModel.initialize(n_students, n_items, n_knowledge, cfg)


def random_q_matrix(rng: np.random.Generator, n_items: int, n_knowledge: int) -> QMatrix:
    rows = []
    for _ in range(n_items):
        size = int(rng.integers(1, min(3, n_knowledge) + 1))
        rows.append(set(rng.choice(n_knowledge, size=size, replace=False).tolist()))
    return QMatrix(rows=rows)
