"""Gradient-magnitude traces and their per-epoch aggregates.

Training emits one :class:`~aprlab.trainers.EpochTrace` per epoch.  Sinks in
this module either keep them (:class:`MemorySink`), reduce them on the fly to
CDF points and global updates (:class:`SummarySink`), or stream the raw
records to disk (:class:`TraceWriter`).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .data import PopularityPartition
from .errors import DataError
from .trainers import EpochTrace

THRESHOLDS = (0.01, 0.1, 0.5)


class MagnitudeRecord(NamedTuple):
    epoch: int
    omega: float
    omega_adv: float | None
    pos_in_head: bool
    neg_in_head: bool


def bayesian_magnitude(s_uij: float) -> float:
    """``1 - sigmoid(s_uij)``: how strongly BPR still pushes this triplet."""
    if s_uij >= 0:
        e = math.exp(-s_uij)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(s_uij))


def adversarial_magnitude(perturbed_s_uij: float) -> float:
    return bayesian_magnitude(perturbed_s_uij)


def trace_records(trace: EpochTrace):
    wa = trace.omega_adv
    for n in range(len(trace)):
        yield MagnitudeRecord(
            trace.epoch,
            float(trace.omega[n]),
            None if wa is None else float(wa[n]),
            bool(trace.pos_head[n]),
            bool(trace.neg_head[n]),
        )


class _Arrays(NamedTuple):
    omega: np.ndarray
    omega_adv: np.ndarray | None
    pos_head: np.ndarray
    neg_head: np.ndarray


def _arrays_from_records(records: list[MagnitudeRecord]) -> _Arrays:
    has_adv = [r.omega_adv is not None for r in records]
    if any(has_adv) and not all(has_adv):
        raise DataError("epoch mixes records with and without omega_adv")
    return _Arrays(
        np.array([r.omega for r in records], dtype=float),
        np.array([r.omega_adv for r in records], dtype=float) if records and all(has_adv) else None,
        np.array([r.pos_in_head for r in records], dtype=bool),
        np.array([r.neg_in_head for r in records], dtype=bool),
    )


def _by_epoch(items) -> dict[int, _Arrays]:
    """Normalize EpochTraces or MagnitudeRecords into per-epoch arrays."""
    out: dict[int, _Arrays] = {}
    pending: dict[int, list] = defaultdict(list)
    for x in items:
        if isinstance(x, EpochTrace):
            out[x.epoch] = _Arrays(x.omega, x.omega_adv, x.pos_head, x.neg_head)
        else:
            pending[x.epoch].append(x)
    for t, recs in pending.items():
        out[t] = _arrays_from_records(recs)
    return dict(sorted(out.items()))


@dataclass
class MagnitudeCdf:
    """``p(value <= tau)`` per epoch; ``adv`` lacks BPR-phase epochs."""

    thresholds: tuple
    omega: dict[int, tuple] = field(default_factory=dict)
    adv: dict[int, tuple] = field(default_factory=dict)

    def rows(self):
        for t, ps in self.omega.items():
            pa = self.adv.get(t)
            for k, tau in enumerate(self.thresholds):
                yield t, tau, ps[k], None if pa is None else pa[k]


def _fractions(values: np.ndarray, thresholds) -> tuple:
    return tuple(float(np.count_nonzero(values <= tau)) / len(values) for tau in thresholds)


def magnitude_cdf(records: Iterable, thresholds=THRESHOLDS) -> MagnitudeCdf:
    thresholds = tuple(sorted(thresholds))
    cdf = MagnitudeCdf(thresholds)
    for t, a in _by_epoch(records).items():
        if len(a.omega) == 0:
            raise DataError(f"epoch {t} has no records")
        cdf.omega[t] = _fractions(a.omega, thresholds)
        if a.omega_adv is not None:
            cdf.adv[t] = _fractions(a.omega_adv, thresholds)
    return cdf


class GlobalUpdates(NamedTuple):
    pos_sh: float
    neg_sh: float
    pos_lt: float
    neg_lt: float


def _global_updates(a: _Arrays, pos_head=None, neg_head=None) -> GlobalUpdates:
    pos_head = a.pos_head if pos_head is None else pos_head
    neg_head = a.neg_head if neg_head is None else neg_head
    total = a.omega if a.omega_adv is None else a.omega + a.omega_adv
    return GlobalUpdates(
        float(total[pos_head].sum()),
        -float(total[neg_head].sum()),
        float(total[~pos_head].sum()),
        -float(total[~neg_head].sum()),
    )


def global_updates(records, partition: PopularityPartition | None = None) -> GlobalUpdates:
    """Global positive/negative updates of one epoch on short head and long tail.

    ``records`` is an :class:`EpochTrace` or a list of :class:`MagnitudeRecord`
    from a single epoch.  With an ``EpochTrace`` and a ``partition``, item
    membership is recomputed from the triplets instead of the stored flags.
    omega_adv counts as zero when absent.
    """
    if isinstance(records, EpochTrace):
        a = _Arrays(records.omega, records.omega_adv, records.pos_head, records.neg_head)
        if partition is not None:
            head = partition.head_mask()
            return _global_updates(a, head[records.triplets.pos], head[records.triplets.neg])
        return _global_updates(a)
    records = list(records)
    if not records:
        return GlobalUpdates(0.0, 0.0, 0.0, 0.0)
    if len({r.epoch for r in records}) > 1:
        raise DataError("records span several epochs")
    return _global_updates(_arrays_from_records(records))


@dataclass
class WineGlassSeries:
    epochs: np.ndarray
    avg_sh: np.ndarray
    avg_lt: np.ndarray
    updates: list

    def rows(self):
        for t, a, b, g in zip(self.epochs.tolist(), self.avg_sh.tolist(), self.avg_lt.tolist(), self.updates):
            yield (t, a, b, *g)

    def phase(self, lo: int, hi: int) -> np.ndarray:
        """Boolean mask of epochs in ``lo <= t <= hi``."""
        return (self.epochs >= lo) & (self.epochs <= hi)


def wine_glass(updates: dict[int, GlobalUpdates], n_sh: int, n_lt: int) -> WineGlassSeries:
    """Per-item averages ``(Omega+ + Omega-) / |group|`` for every epoch."""
    if n_sh <= 0 or n_lt <= 0:
        raise DataError("both item groups must be non-empty")
    epochs = sorted(updates)
    ups = [updates[t] for t in epochs]
    avg_sh = np.array([(g.pos_sh + g.neg_sh) / n_sh for g in ups])
    avg_lt = np.array([(g.pos_lt + g.neg_lt) / n_lt for g in ups])
    return WineGlassSeries(np.array(epochs, dtype=int), avg_sh, avg_lt, ups)


# ---------------------------------------------------------------- sinks


class MemorySink:
    """Keeps every epoch trace; for tests and small runs."""

    def __init__(self):
        self.traces: list[EpochTrace] = []

    def record(self, trace: EpochTrace):
        self.traces.append(trace)


class SummarySink:
    """Reduces each epoch to its CDF points and global updates."""

    def __init__(self, partition: PopularityPartition, thresholds=THRESHOLDS):
        self.partition = partition
        self.thresholds = tuple(sorted(thresholds))
        self.cdf = MagnitudeCdf(self.thresholds)
        self.updates: dict[int, GlobalUpdates] = {}
        self.mean_omega: dict[int, float] = {}
        self.mean_omega_adv: dict[int, float] = {}
        self.count: dict[int, int] = {}

    def record(self, trace: EpochTrace):
        t = trace.epoch
        self.cdf.omega[t] = _fractions(trace.omega, self.thresholds)
        self.mean_omega[t] = float(trace.omega.mean())
        if trace.omega_adv is not None:
            self.cdf.adv[t] = _fractions(trace.omega_adv, self.thresholds)
            self.mean_omega_adv[t] = float(trace.omega_adv.mean())
        self.updates[t] = global_updates(trace)
        self.count[t] = len(trace)

    def copy(self) -> "SummarySink":
        new = SummarySink(self.partition, self.thresholds)
        new.cdf.omega = dict(self.cdf.omega)
        new.cdf.adv = dict(self.cdf.adv)
        new.updates = dict(self.updates)
        new.mean_omega = dict(self.mean_omega)
        new.mean_omega_adv = dict(self.mean_omega_adv)
        new.count = dict(self.count)
        return new

    def wine_glass(self) -> WineGlassSeries:
        p = self.partition
        return wine_glass(self.updates, len(p.short_head), len(p.long_tail))


class TraceWriter:
    """Streams raw records, one line per triplet: ``t,omega,omega_adv|-,pos_head,neg_head``."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="ascii")

    def record(self, trace: EpochTrace):
        n = len(trace)
        cols = [
            np.full(n, str(trace.epoch), dtype=object),
            np.char.mod("%.17g", trace.omega).astype(object),
            np.full(n, "-", dtype=object) if trace.omega_adv is None else np.char.mod("%.17g", trace.omega_adv).astype(object),
            np.where(trace.pos_head, "1", "0").astype(object),
            np.where(trace.neg_head, "1", "0").astype(object),
        ]
        self._fh.write("".join(",".join(row) + "\n" for row in zip(*cols)))

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list[MagnitudeRecord]:
    out = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            t, w, wa, ph, nh = line.rstrip("\n").split(",")
            out.append(MagnitudeRecord(int(t), float(w), None if wa == "-" else float(wa), ph == "1", nh == "1"))
    return out


class TeeSink:
    def __init__(self, *sinks):
        self.sinks = [s for s in sinks if s is not None]

    def record(self, trace: EpochTrace):
        for s in self.sinks:
            s.record(trace)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_magnitudes_csv(cdf: MagnitudeCdf, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "tau", "p_omega", "p_omega_adv"])
        for t, tau, p, pa in cdf.rows():
            w.writerow([t, tau, _fmt(p), _fmt(pa)])


def write_wineglass_csv(series: WineGlassSeries, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "avg_sh", "avg_lt", "omega_pos_sh", "omega_neg_sh", "omega_pos_lt", "omega_neg_lt"])
        for row in series.rows():
            w.writerow([row[0], *(_fmt(x) for x in row[1:])])


def read_wineglass_csv(path) -> WineGlassSeries:
    with open(path, encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    ups = [
        GlobalUpdates(float(r["omega_pos_sh"]), float(r["omega_neg_sh"]), float(r["omega_pos_lt"]), float(r["omega_neg_lt"]))
        for r in rows
    ]
    return WineGlassSeries(
        np.array([int(r["epoch"]) for r in rows]),
        np.array([float(r["avg_sh"]) for r in rows]),
        np.array([float(r["avg_lt"]) for r in rows]),
        ups,
    )


def read_magnitudes_csv(path) -> MagnitudeCdf:
    with open(path, encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    taus = tuple(sorted({float(r["tau"]) for r in rows}))
    cdf = MagnitudeCdf(taus)
    om: dict[int, dict] = defaultdict(dict)
    ad: dict[int, dict] = defaultdict(dict)
    for r in rows:
        t, tau = int(r["epoch"]), float(r["tau"])
        om[t][tau] = float(r["p_omega"])
        if r["p_omega_adv"]:
            ad[t][tau] = float(r["p_omega_adv"])
    cdf.omega = {t: tuple(v[x] for x in taus) for t, v in sorted(om.items())}
    cdf.adv = {t: tuple(v[x] for x in taus) for t, v in sorted(ad.items())}
    return cdf
