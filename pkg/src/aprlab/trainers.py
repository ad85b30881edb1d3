"""BPR and APR training of a :class:`~aprlab.model.FactorModel`.

Every step is a per-triplet SGD update.  Epoch ``t`` draws its triplets from
a generator seeded with ``(seed, t)``, so an APR phase warm-started from a
stored BPR model replays exactly the epochs a single uninterrupted run would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .data import Dataset, PopularityPartition, partition_items
from .errors import DataError, NumericalError
from .model import FactorModel

log = logging.getLogger(__name__)

NORMALIZATIONS = {"joint": kernels.JOINT, "per_row": kernels.PER_ROW}


class Triplet(NamedTuple):
    u: int
    i: int
    j: int


@dataclass
class TripletBatch:
    """One epoch of training triplets ``D_F(t)`` as parallel index arrays."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self):
        return len(self.users)

    def __iter__(self):
        for t in zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist()):
            yield Triplet(*t)

    def __getitem__(self, n) -> Triplet:
        return Triplet(int(self.users[n]), int(self.pos[n]), int(self.neg[n]))

    @classmethod
    def from_triplets(cls, triplets) -> "TripletBatch":
        arr = np.array([tuple(t) for t in triplets], dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())


@dataclass
class TrainSchedule:
    eta: float
    t_bpr: int
    t_apr: int
    eps: float = 0.0
    alpha: float = 0.0
    l2: float = 0.0
    seed: int = 0
    normalization: str = "joint"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.t_bpr < 1 or self.t_apr < self.t_bpr:
            raise ValueError("need 1 <= t_bpr <= t_apr")
        if self.eps < 0 or self.alpha < 0 or self.l2 < 0:
            raise ValueError("eps, alpha and l2 must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {sorted(NORMALIZATIONS)}")


@dataclass
class Perturbation:
    d_pu: np.ndarray
    d_qi: np.ndarray
    d_qj: np.ndarray
    eps: float

    @property
    def norm(self) -> float:
        return math.sqrt(float(self.d_pu @ self.d_pu + self.d_qi @ self.d_qi + self.d_qj @ self.d_qj))


def epoch_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.default_rng([seed, t])


def sample_negatives(train: Dataset, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws from ``I \\ I+_u`` for each entry of ``users`` by rejection."""
    N = train.num_items
    keys = train.pair_keys()
    neg = rng.integers(N, size=len(users))
    todo = np.arange(len(users))
    while len(todo):
        k = users[todo] * N + neg[todo]
        pos = np.searchsorted(keys, k)
        pos[pos == len(keys)] = 0
        hit = keys[pos] == k
        todo = todo[hit]
        neg[todo] = rng.integers(N, size=len(todo))
    return neg


def sample_epoch(train: Dataset, seed: int, t: int) -> TripletBatch:
    """One triplet per observed (u, i) pair with a uniform negative, shuffled.

    Users whose positives cover the whole catalogue cannot be given a
    negative; their pairs are skipped with a warning.
    """
    rng = epoch_rng(seed, t)
    users = np.repeat(np.arange(train.num_users, dtype=np.int64), train.user_degree)
    pos = np.asarray(train.indices, dtype=np.int64)
    full = train.user_degree >= train.num_items
    if full.any():
        log.warning("skipping %d user(s) with no negative items", int(full.sum()))
        keep = ~full[users]
        users, pos = users[keep], pos[keep]
    neg = sample_negatives(train, users, rng)
    order = rng.permutation(len(users))
    return TripletBatch(users[order], pos[order], neg[order])


def _as_batch(triplets) -> TripletBatch:
    if isinstance(triplets, TripletBatch):
        return triplets
    if isinstance(triplets, Triplet):
        triplets = [triplets]
    return TripletBatch.from_triplets(triplets)


def score_diffs(model: FactorModel, triplets) -> np.ndarray:
    b = _as_batch(triplets)
    return np.einsum("nf,nf->n", model.P[b.users], model.Q[b.pos] - model.Q[b.neg])


def bpr_loss(model: FactorModel, triplets) -> float:
    """Negative log-likelihood ``-sum ln sigmoid(s_uij)``, as a sum of softplus(-s)."""
    x = score_diffs(model, triplets)
    if len(x) == 0:
        raise ValueError("empty triplet sequence")
    return float(np.sum(np.logaddexp(0.0, -x)))


def _check_triplet(model: FactorModel, t: Triplet):
    u, i, j = t
    if not (0 <= u < model.num_users and 0 <= i < model.num_items and 0 <= j < model.num_items):
        raise IndexError(f"triplet {tuple(t)} out of range")


def bpr_step(model: FactorModel, t: Triplet, eta: float, l2: float = 0.0) -> float:
    """In-place BPR update on one triplet; returns the magnitude omega."""
    _check_triplet(model, t)
    w = kernels.bpr_step(model.P, model.Q, t[0], t[1], t[2], eta, l2)
    if math.isnan(w):
        raise NumericalError(f"non-finite BPR update at triplet {tuple(t)}")
    return w


def fgsm_perturbation(model: FactorModel, t: Triplet, eps: float, normalization: str = "joint") -> Perturbation:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    _check_triplet(model, t)
    u, i, j = t
    f = model.f
    d = np.empty((3, f))
    kernels.fgsm(model.P[u].copy(), model.Q[i].copy(), model.Q[j].copy(), eps, NORMALIZATIONS[normalization], d[0], d[1], d[2])
    return Perturbation(d[0], d[1], d[2], eps)


def adversarial_score_diff(model: FactorModel, pert: Perturbation, t: Triplet) -> float:
    u, i, j = t
    pu = model.P[u] + pert.d_pu
    return float(pu @ ((model.Q[i] + pert.d_qi) - (model.Q[j] + pert.d_qj)))


def apr_step(
    model: FactorModel, t: Triplet, eta: float, eps: float, alpha: float, l2: float = 0.0,
    normalization: str = "joint",
) -> tuple[float, float]:
    """In-place APR update; returns ``(omega, omega_adv)``."""
    _check_triplet(model, t)
    f = model.f
    d = np.empty((3, f))
    w, wa = kernels.apr_step(
        model.P, model.Q, t[0], t[1], t[2], eta, eps, alpha, l2, NORMALIZATIONS[normalization], d[0], d[1], d[2]
    )
    if math.isnan(w):
        raise NumericalError(f"non-finite APR update at triplet {tuple(t)}")
    return w, wa


@dataclass
class EpochTrace:
    """Per-triplet magnitudes of one epoch, in the order the steps ran.

    ``omega_adv`` is ``None`` during the BPR phase.
    """

    epoch: int
    triplets: TripletBatch
    omega: np.ndarray
    omega_adv: np.ndarray | None
    pos_head: np.ndarray
    neg_head: np.ndarray

    def __len__(self):
        return len(self.omega)


def train(
    model: FactorModel,
    train: Dataset,
    sched: TrainSchedule,
    sink=None,
    partition: PopularityPartition | None = None,
    start_epoch: int = 1,
    end_epoch: int | None = None,
) -> FactorModel:
    """Run epochs ``start_epoch .. end_epoch`` (default ``1 .. t_apr``) in place.

    Epochs up to ``t_bpr`` apply BPR steps, later epochs APR steps.  After
    each epoch ``sink.record(trace)`` receives an :class:`EpochTrace`.
    """
    if model.num_users != train.num_users or model.num_items != train.num_items:
        raise DataError(
            f"model is {model.num_users}x{model.num_items}, data is {train.num_users}x{train.num_items}"
        )
    end_epoch = sched.t_apr if end_epoch is None else end_epoch
    if partition is None and sink is not None and train.num_items >= 5:
        partition = partition_items(train)
    head = partition.head_mask() if partition is not None else np.zeros(train.num_items, dtype=bool)
    mode = NORMALIZATIONS[sched.normalization]

    for t in range(start_epoch, end_epoch + 1):
        batch = sample_epoch(train, sched.seed, t)
        adversarial = t > sched.t_bpr
        w = np.empty(len(batch))
        wa = np.empty(len(batch)) if adversarial else np.empty(0)
        bad = kernels.run_epoch(
            model.P, model.Q, batch.users, batch.pos, batch.neg, sched.eta, sched.l2,
            adversarial, sched.eps, sched.alpha, mode, w, wa,
        )
        if bad >= 0:
            raise NumericalError(
                f"non-finite update at epoch {t}, step {bad}, triplet {tuple(batch[bad])} "
                f"(eta={sched.eta}, eps={sched.eps}, alpha={sched.alpha})"
            )
        if sink is not None:
            sink.record(EpochTrace(t, batch, w, wa if adversarial else None, head[batch.pos], head[batch.neg]))
    return model
