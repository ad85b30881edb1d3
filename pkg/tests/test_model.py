import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aprlab.errors import ModelDimensionError, ModelFileError, ModelVersionError
from aprlab.model import (
    FactorModel,
    ModelConfig,
    init_model,
    load_model,
    rank_items,
    save_model,
    score,
    score_diff,
    top_k,
)


def test_init_deterministic_and_shape():
    a = init_model(5, 7, ModelConfig(f=3, seed=4))
    b = init_model(5, 7, ModelConfig(f=3, seed=4))
    assert a.P.shape == (5, 3) and a.Q.shape == (7, 3)
    assert a.P.tobytes() == b.P.tobytes() and a.Q.tobytes() == b.Q.tobytes()


def test_init_tiny():
    m = init_model(1, 1, ModelConfig(f=1))
    assert m.P.shape == (1, 1) and m.Q.shape == (1, 1)


def test_init_mean_and_std():
    m = init_model(200, 50, ModelConfig(f=64, init_std=0.01, seed=1))
    assert abs(m.P.mean()) <= 0.005
    assert abs(m.P.std() - 0.01) < 0.001


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(f=0)
    with pytest.raises(ValueError):
        ModelConfig(init_std=0)


def test_score_examples():
    m = FactorModel(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0], [1.0, 2.0]]))
    assert score(m, 0, 0) == 1.0
    assert score(m, 0, 1) == 5.0  # Q_i = P_u gives the squared norm
    assert score(FactorModel(np.zeros((1, 2)), np.zeros((1, 2))), 0, 0) == 0.0


def test_score_out_of_range():
    m = FactorModel(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(IndexError):
        score(m, 2, 0)
    with pytest.raises(IndexError):
        score_diff(m, 0, 0, 3)


def test_score_diff_properties(rng):
    m = FactorModel(rng.normal(size=(4, 3)), rng.normal(size=(6, 3)))
    for _ in range(20):
        u, i, j = rng.integers(4), rng.integers(6), rng.integers(6)
        assert score_diff(m, u, i, i) == 0.0
        assert score_diff(m, u, i, j) == -score_diff(m, u, j, i)
        assert abs(score_diff(m, u, i, j) - np.dot(m.P[u], m.Q[i] - m.Q[j])) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100, allow_nan=False), st.integers(0, 2**31))
def test_score_bilinear(c, seed):
    r = np.random.default_rng(seed)
    m = FactorModel(r.normal(size=(3, 4)), r.normal(size=(5, 4)))
    u, i = int(r.integers(3)), int(r.integers(5))
    s = score(m, u, i)
    m.P[u] *= c
    assert score(m, u, i) == pytest.approx(c * s, rel=1e-12, abs=1e-12)


def test_top_k_examples():
    m = FactorModel(np.array([[1.0]]), np.array([[0.5], [0.9], [0.1]]))
    assert top_k(m, 0, 2).tolist() == [1, 0]
    assert top_k(m, 0, 5, excluded={0, 1}).tolist() == [2]
    flat = FactorModel(np.array([[1.0]]), np.ones((4, 1)))
    assert top_k(flat, 0, 4).tolist() == [0, 1, 2, 3]


def test_top_k_errors():
    m = FactorModel(np.ones((1, 1)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        top_k(m, 0, 1, excluded={0, 1})
    with pytest.raises(ValueError):
        top_k(m, 0, 0)
    with pytest.raises(IndexError):
        top_k(m, 1, 1)


def test_top_k_full_is_permutation(rng):
    m = FactorModel(rng.normal(size=(2, 3)), rng.normal(size=(9, 3)))
    assert sorted(top_k(m, 1, 9).tolist()) == list(range(9))


def test_top_k_invariant_to_constant_shift(rng):
    P, Q = rng.normal(size=(3, 4)), rng.normal(size=(10, 4))
    base = FactorModel(P, Q)
    c = 2.5
    # extra feature: 1 on the user side, c on every item, so each score gains c
    shifted = FactorModel(np.hstack([P, np.ones((3, 1))]), np.hstack([Q, np.full((10, 1), c)]))
    for u in range(3):
        assert np.allclose(shifted.user_scores(u), base.user_scores(u) + c)
        assert top_k(shifted, u, 10).tolist() == top_k(base, u, 10).tolist()


def test_rank_items_matches_sorted_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(1, 12))
        s = rng.integers(0, 4, size=n).astype(float)  # many ties
        excl = set(rng.choice(n, size=int(rng.integers(0, n)), replace=False).tolist())
        k = int(rng.integers(1, n + 2))
        expect = sorted((i for i in range(n) if i not in excl), key=lambda i: (-s[i], i))[:k]
        assert rank_items(s, k, excl).tolist() == expect


def test_save_load_roundtrip(tmp_path, rng):
    m = FactorModel(rng.normal(size=(3, 2)) * 1e3, rng.normal(size=(4, 2)) / 7)
    save_model(m, tmp_path / "m.txt")
    back = load_model(tmp_path / "m.txt")
    assert np.array_equal(back.P, m.P) and np.array_equal(back.Q, m.Q)
    for u in range(3):
        for i in range(4):
            assert score(back, u, i) == score(m, u, i)


def test_load_dimension_mismatch(tmp_path):
    rows = "\n".join(" ".join(["0.5"] * 63) for _ in range(2))
    (tmp_path / "m.txt").write_text(f"APRLAB-MODEL 1\n1 1 64\n{rows}\n")
    with pytest.raises(ModelDimensionError):
        load_model(tmp_path / "m.txt")


def test_load_wrong_row_count(tmp_path):
    (tmp_path / "m.txt").write_text("APRLAB-MODEL 1\n2 1 1\n0.5\n0.5\n")
    with pytest.raises(ModelDimensionError):
        load_model(tmp_path / "m.txt")


def test_load_bad_header(tmp_path):
    (tmp_path / "m.txt").write_text("SOMETHING 1\n1 1 1\n0\n0\n")
    with pytest.raises(ModelVersionError):
        load_model(tmp_path / "m.txt")
    (tmp_path / "m.txt").write_text("APRLAB-MODEL 2\n1 1 1\n0\n0\n")
    with pytest.raises(ModelVersionError):
        load_model(tmp_path / "m.txt")


def test_load_corrupt(tmp_path):
    (tmp_path / "m.txt").write_text("APRLAB-MODEL 1\n1 1 1\nabc\n0\n")
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "m.txt")
    (tmp_path / "e.txt").write_text("")
    with pytest.raises(ModelFileError):
        load_model(tmp_path / "e.txt")
