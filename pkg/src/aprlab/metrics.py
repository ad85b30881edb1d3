"""Top-k accuracy, beyond-accuracy and popularity-bias metrics.

All metrics average over the users that have a held-out test item, visited
in ascending user index so that reductions are reproducible.  Undefined
values (zero denominators) are reported as ``None``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import betainc

from .data import Dataset, PopularityPartition, TrainTestSplit, head_probability, partition_items
from .model import FactorModel, rank_items

METRIC_ORDER = (
    "Rec", "Prec", "nDCG", "Nov", "Cov%", "ARP", "APLT", "ACLT",
    "RSP", "REO", "P_SH", "Phat_SH", "P_LT", "Phat_LT",
)
ACCURACY_METRICS = ("Rec", "Prec", "nDCG")


@dataclass
class RecommendationSet:
    k: int
    lists: dict[int, np.ndarray]

    def slots(self) -> np.ndarray:
        if not self.lists:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([self.lists[u] for u in sorted(self.lists)])


@dataclass
class MetricReport:
    k: int
    n_users: int
    values: dict[str, float | None]
    users: np.ndarray = field(repr=False)
    rec_per_user: np.ndarray = field(repr=False)
    ndcg_per_user: np.ndarray = field(repr=False)

    def __getitem__(self, name):
        return self.values[name]

    @property
    def undefined(self) -> list[str]:
        return [k for k, v in self.values.items() if v is None]

    def to_json(self) -> str:
        obj = {name: self.values[name] for name in METRIC_ORDER if name in self.values}
        obj["k"] = self.k
        obj["n_users"] = self.n_users
        obj["undefined_metrics"] = self.undefined
        return json.dumps(obj, indent=2) + "\n"

    def peruser_csv(self) -> str:
        lines = ["user,rec,ndcg"]
        lines += [f"{u},{r!r},{g!r}" for u, r, g in zip(self.users.tolist(), self.rec_per_user.tolist(), self.ndcg_per_user.tolist())]
        return "\n".join(lines) + "\n"


def recommend_all(model: FactorModel, split: TrainTestSplit, k: int) -> RecommendationSet:
    """Top-k lists for every test user, excluding their train positives."""
    train = split.train
    if model.num_users != train.num_users or model.num_items != train.num_items:
        raise ValueError("model dimensions do not match the split")
    lists = {}
    for u in split.test_users:
        lists[u] = rank_items(model.user_scores(u), k, train.positives(u))
    return RecommendationSet(k, lists)


class AccuracyResult(NamedTuple):
    rec: float
    prec: float
    ndcg: float
    users: np.ndarray
    rec_per_user: np.ndarray
    ndcg_per_user: np.ndarray


def accuracy_metrics(rec: RecommendationSet, test: dict[int, int]) -> AccuracyResult:
    """Recall, precision and nDCG with one relevant (held-out) item per user."""
    users = sorted(rec.lists)
    if not users:
        raise ValueError("empty test set")
    hits = np.zeros(len(users))
    gains = np.zeros(len(users))
    for n, u in enumerate(users):
        if u not in test:
            raise ValueError(f"user {u} has no test item")
        where = np.flatnonzero(rec.lists[u] == test[u])
        if len(where):
            hits[n] = 1.0
            gains[n] = 1.0 / math.log2(2 + int(where[0]))
    r = float(hits.mean())
    return AccuracyResult(r, float((hits / rec.k).mean()), float(gains.mean()), np.array(users), hits, gains)


def coverage_pct(rec: RecommendationSet, N: int) -> float:
    if N <= 0:
        raise ValueError("N must be > 0")
    return 100.0 * len(np.unique(rec.slots())) / N


def novelty(rec: RecommendationSet, popularity: np.ndarray, M: int) -> float:
    """Mean self-information ``log2(M / phi(i))`` over all recommended slots."""
    slots = rec.slots()
    if len(slots) == 0:
        raise ValueError("no recommended items")
    phi = np.maximum(popularity[slots], 1)
    return float(np.mean(np.log2(M / phi)))


class LongTailResult(NamedTuple):
    arp: float
    aplt: float
    aclt: float


def long_tail_metrics(rec: RecommendationSet, partition: PopularityPartition, popularity: np.ndarray) -> LongTailResult:
    tail = ~partition.head_mask()
    arp, aplt, aclt = [], [], []
    for u in sorted(rec.lists):
        lst = rec.lists[u]
        if len(lst) == 0:
            raise ValueError(f"empty list for user {u}")
        n_tail = int(np.count_nonzero(tail[lst]))
        arp.append(float(popularity[lst].mean()))
        aplt.append(n_tail / len(lst))
        aclt.append(float(n_tail))
    return LongTailResult(float(np.mean(arp)), float(np.mean(aplt)), float(np.mean(aclt)))


def _parity(a: float, b: float) -> float | None:
    # population std over two values divided by their mean
    s = a + b
    return None if s == 0 else abs(a - b) / s


class UnderRecommendation(NamedTuple):
    rsp: float | None
    reo: float | None
    p_sh: float | None
    p_lt: float | None
    q_sh: float | None
    q_lt: float | None


def under_recommendation_metrics(
    rec: RecommendationSet, split: TrainTestSplit, partition: PopularityPartition
) -> UnderRecommendation:
    """Ranking-based statistical parity (RSP) and equal opportunity (REO) over SH/LT.

    P_g is the share of group items a user could be shown that are shown;
    Q_g is the share of held-out group items that are hit.
    """
    head = partition.head_mask()
    n_head = int(head.sum())
    n_tail = partition.num_items - n_head
    train = split.train
    rec_cnt = np.zeros(2)
    avail = np.zeros(2)
    hit = np.zeros(2)
    relevant = np.zeros(2)
    for u in sorted(rec.lists):
        lst = rec.lists[u]
        in_head = head[lst]
        rec_cnt += (in_head.sum(), len(lst) - in_head.sum())
        pos_head = int(head[train.positives(u)].sum())
        avail += (n_head - pos_head, n_tail - (len(train.positives(u)) - pos_head))
        t = split.test.get(u)
        if t is not None:
            g = 0 if head[t] else 1
            relevant[g] += 1
            if np.any(lst == t):
                hit[g] += 1
    p = [rec_cnt[g] / avail[g] if avail[g] > 0 else None for g in (0, 1)]
    q = [hit[g] / relevant[g] if relevant[g] > 0 else None for g in (0, 1)]
    rsp = _parity(*p) if None not in p else None
    reo = _parity(*q) if None not in q else None
    return UnderRecommendation(rsp, reo, p[0], p[1], q[0], q[1])


class ExposureResult(NamedTuple):
    p_sh: float
    phat_sh: float
    p_lt: float
    phat_lt: float


def exposure_probs(rec: RecommendationSet, train: Dataset, partition: PopularityPartition) -> ExposureResult:
    """Short-head share of the feedback data vs. of the recommended slots."""
    slots = rec.slots()
    if len(slots) == 0 or len(train) == 0:
        raise ValueError("empty recommendations or training data")
    p_sh = head_probability(train, partition)
    phat_sh = float(np.count_nonzero(partition.head_mask()[slots])) / len(slots)
    return ExposureResult(p_sh, phat_sh, 1.0 - p_sh, 1.0 - phat_sh)


def relative_variation(base: float | None, cand: float | None) -> float | None:
    """Percentage change from ``base`` to ``cand``; ``None`` when undefined."""
    if base is None or cand is None or base == 0:
        return None
    return 100.0 * (cand - base) / base


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns ``(t, p)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, p


def evaluate(
    model: FactorModel, split: TrainTestSplit, k: int, partition: PopularityPartition | None = None
) -> MetricReport:
    """Every metric of the report on the model's top-k lists."""
    train = split.train
    partition = partition or partition_items(train)
    rec = recommend_all(model, split, k)
    return report_from_lists(rec, split, partition)


def report_from_lists(rec: RecommendationSet, split: TrainTestSplit, partition: PopularityPartition) -> MetricReport:
    train = split.train
    acc = accuracy_metrics(rec, split.test)
    lt = long_tail_metrics(rec, partition, train.popularity)
    ur = under_recommendation_metrics(rec, split, partition)
    ex = exposure_probs(rec, train, partition)
    values = {
        "Rec": acc.rec,
        "Prec": acc.prec,
        "nDCG": acc.ndcg,
        "Nov": novelty(rec, train.popularity, train.num_users),
        "Cov%": coverage_pct(rec, train.num_items),
        "ARP": lt.arp,
        "APLT": lt.aplt,
        "ACLT": lt.aclt,
        "RSP": ur.rsp,
        "REO": ur.reo,
        "P_SH": ex.p_sh,
        "Phat_SH": ex.phat_sh,
        "P_LT": ex.p_lt,
        "Phat_LT": ex.phat_lt,
    }
    return MetricReport(rec.k, len(acc.users), values, acc.users, acc.rec_per_user, acc.ndcg_per_user)
