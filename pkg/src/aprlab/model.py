"""Matrix factorization parameters: scoring, ranking and the model file format."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModelDimensionError, ModelFileError, ModelVersionError

MODEL_TAG = "APRLAB-MODEL"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    f: int = 64
    init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.f < 1:
            raise ValueError("f must be >= 1")
        if not self.init_std > 0:
            raise ValueError("init_std must be > 0")


@dataclass(eq=False)
class FactorModel:
    """User factors ``P`` (M x f) and item factors ``Q`` (N x f).

    The arrays are mutated in place by the trainers.
    """

    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.P = np.ascontiguousarray(self.P, dtype=np.float64)
        self.Q = np.ascontiguousarray(self.Q, dtype=np.float64)
        if self.P.ndim != 2 or self.Q.ndim != 2 or self.P.shape[1] != self.Q.shape[1]:
            raise ValueError(f"incompatible factor shapes {self.P.shape} and {self.Q.shape}")

    @property
    def num_users(self) -> int:
        return self.P.shape[0]

    @property
    def num_items(self) -> int:
        return self.Q.shape[0]

    @property
    def f(self) -> int:
        return self.P.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.P.copy(), self.Q.copy())

    def _check_user(self, u):
        if not 0 <= u < self.num_users:
            raise IndexError(f"user {u} out of range [0, {self.num_users})")

    def _check_item(self, i):
        if not 0 <= i < self.num_items:
            raise IndexError(f"item {i} out of range [0, {self.num_items})")

    def user_scores(self, u: int) -> np.ndarray:
        self._check_user(u)
        return self.Q @ self.P[u]


def init_model(M: int, N: int, cfg: ModelConfig) -> FactorModel:
    if M < 1 or N < 1:
        raise ValueError("M and N must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    P = rng.normal(0.0, cfg.init_std, size=(M, cfg.f))
    Q = rng.normal(0.0, cfg.init_std, size=(N, cfg.f))
    return FactorModel(P, Q)


def score(model: FactorModel, u: int, i: int) -> float:
    model._check_user(u)
    model._check_item(i)
    return float(np.dot(model.P[u], model.Q[i]))


def score_diff(model: FactorModel, u: int, i: int, j: int) -> float:
    return score(model, u, i) - score(model, u, j)


def rank_items(scores: np.ndarray, k: int, excluded=None) -> np.ndarray:
    """Top-``k`` indices of ``scores`` by score desc, then index asc."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if excluded is None or len(excluded) == 0:
        cand = np.arange(len(scores))
    else:
        keep = np.ones(len(scores), dtype=bool)
        idx = excluded if isinstance(excluded, np.ndarray) else list(excluded)
        keep[np.asarray(idx, dtype=np.int64)] = False
        cand = np.flatnonzero(keep)
    # stable sort keeps ascending index order among equal scores
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order[:k]]


def top_k(model: FactorModel, u: int, k: int, excluded=()) -> np.ndarray:
    """Ranked item list for user ``u``; length is ``min(k, N - |excluded|)``."""
    scores = model.user_scores(u)
    out = rank_items(scores, k, excluded)
    if len(out) == 0:
        raise ValueError(f"no items left to rank for user {u}")
    return out


def save_model(model: FactorModel, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{MODEL_TAG} {MODEL_VERSION}\n")
        fh.write(f"{model.num_users} {model.num_items} {model.f}\n")
        for mat in (model.P, model.Q):
            for row in mat:
                fh.write(" ".join(format(x, ".17g") for x in row.tolist()))
                fh.write("\n")


def load_model(path) -> FactorModel:
    path = Path(path)
    try:
        lines = path.read_text(encoding="ascii").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ModelFileError(f"{path}: cannot read model file ({exc})") from None
    if not lines:
        raise ModelFileError(f"{path}: empty model file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MODEL_TAG or head[1] != str(MODEL_VERSION):
        raise ModelVersionError(f"{path}: unsupported model header {lines[0]!r}")
    try:
        M, N, f = (int(x) for x in lines[1].split())
    except (IndexError, ValueError):
        raise ModelFileError(f"{path}: bad dimension line") from None
    body = lines[2:]
    if len(body) != M + N:
        raise ModelDimensionError(f"{path}: expected {M + N} rows, found {len(body)}")
    rows = []
    for k, line in enumerate(body, start=3):
        vals = line.split()
        if len(vals) != f:
            raise ModelDimensionError(f"{path}:{k}: expected {f} columns, found {len(vals)}")
        try:
            rows.append([float(v) for v in vals])
        except ValueError:
            raise ModelFileError(f"{path}:{k}: non-numeric entry") from None
    arr = np.array(rows, dtype=np.float64).reshape(M + N, f)
    if not np.all(np.isfinite(arr)):
        raise ModelFileError(f"{path}: non-finite entries")
    return FactorModel(arr[:M], arr[M:])
