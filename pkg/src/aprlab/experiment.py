"""Experiment orchestration: configs, single runs, grid search, comparisons, attacks.

Runs persist under ``<out>/runs/<key>/`` where ``key`` encodes model kind,
hyperparameters and seed.  Each run directory holds ``model.txt``,
``metrics.json``, ``peruser.csv``, ``magnitudes.csv``, ``wineglass.csv`` and
``record.json``.  ``metrics.json`` and ``model.txt`` depend only on the
config and seed; wall-clock times live in ``record.json`` and the manifest.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import (
    PopularityPartition,
    TrainTestSplit,
    load_interactions,
    partition_items,
    save_split,
    split_fingerprint,
    temporal_leave_one_out,
)
from .errors import DataError, NumericalError
from .instrumentation import (
    SummarySink,
    TeeSink,
    TraceWriter,
    read_magnitudes_csv,
    read_wineglass_csv,
    write_magnitudes_csv,
    write_wineglass_csv,
)
from .metrics import (
    ACCURACY_METRICS,
    METRIC_ORDER,
    MetricReport,
    evaluate,
    paired_t_test,
    relative_variation,
)
from .model import FactorModel, ModelConfig, init_model, load_model, save_model
from .trainers import TrainSchedule, sample_epoch, train

log = logging.getLogger(__name__)

SIGNIFICANCE = 0.05


@dataclass
class ExperimentConfig:
    dataset: str = ""
    format: str = "tsv"
    f: int = 64
    k: tuple = (50,)
    eta: tuple = (0.005, 0.01, 0.05)
    eps: tuple = (0.001, 0.01, 0.1, 1.0)
    alpha: tuple = (0.001, 0.01, 0.1, 1.0, 10.0)
    t_bpr: int = 100
    t_apr: int = 200
    seeds: tuple = (0, 1, 2)
    out: str = "runs"
    l2: float = 0.0
    init_std: float = 0.01
    normalization: str = "joint"
    # "test" selects on test Rec@k; "validation" holds out each user's
    # second-latest interaction and selects on it
    selection: str = "test"
    raw_trace: bool = False

    def __post_init__(self):
        for name in ("k", "eta", "eps", "alpha", "seeds"):
            v = getattr(self, name)
            if not isinstance(v, tuple):
                v = tuple(v) if isinstance(v, (list, np.ndarray)) else (v,)
                setattr(self, name, v)
            if not v:
                raise ValueError(f"{name} grid is empty")
        if self.selection not in ("test", "validation"):
            raise ValueError("selection must be 'test' or 'validation'")
        if self.t_bpr < 1 or self.t_apr < self.t_bpr:
            raise ValueError("need 1 <= t_bpr <= t_apr")

    @property
    def select_k(self) -> int:
        return 50 if 50 in self.k else self.k[0]

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name: str, raw: str):
    default = _FIELD_TYPES[name].default
    if isinstance(default, tuple):
        elem = int if name in ("k", "seeds") else float
        return tuple(elem(x) for x in raw.split(",") if x.strip())
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, overrides: dict | None = None, base_dir=None) -> ExperimentConfig:
    """Flat ``key = value`` text; ``#`` starts a comment; lists are comma-separated."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    for key, v in (overrides or {}).items():
        if v is not None:
            values[key] = v
    if base_dir is not None:
        for key in ("dataset", "out"):
            if key in values and values[key] and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    return ExperimentConfig(**values)


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), overrides, base_dir=path.parent)


# ---------------------------------------------------------------- data


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Split used for reporting plus the (possibly inner) split used for training/selection."""

    split: TrainTestSplit
    fit: TrainTestSplit
    partition: PopularityPartition
    fingerprint: str


@lru_cache(maxsize=4)
def _prepare_cached(path: str, fmt: str, mtime: float, selection: str) -> PreparedData:
    ds = load_interactions(path, fmt)
    split = temporal_leave_one_out(ds)
    fit = temporal_leave_one_out(split.train) if selection == "validation" else split
    return PreparedData(split, fit, partition_items(fit.train), split_fingerprint(split))


def prepare_data(config: ExperimentConfig) -> PreparedData:
    p = Path(config.dataset)
    if not p.exists():
        raise DataError(f"{p}: dataset not found")
    return _prepare_cached(str(p.resolve()), config.format, p.stat().st_mtime, config.selection)


# ---------------------------------------------------------------- runs


def run_key(kind: str, eta: float, eps: float, alpha: float, seed: int) -> str:
    if kind == "bpr":
        return f"bpr_eta{eta:g}_seed{seed}"
    return f"apr_eta{eta:g}_eps{eps:g}_alpha{alpha:g}_seed{seed}"


@dataclass(eq=False)
class RunRecord:
    kind: str
    eta: float
    eps: float
    alpha: float
    seed: int
    reports: dict[int, MetricReport]
    fingerprint: str
    run_dir: Path | None = None
    wall_time: float = 0.0
    selection_score: float | None = None
    summary: SummarySink | None = field(default=None, repr=False)
    model: FactorModel | None = field(default=None, repr=False)

    @property
    def key(self) -> str:
        return run_key(self.kind, self.eta, self.eps, self.alpha, self.seed)

    @property
    def k(self) -> int:
        return 50 if 50 in self.reports else min(self.reports)

    @property
    def report(self) -> MetricReport:
        return self.reports[self.k]

    @property
    def score(self) -> float:
        return self.report["Rec"] if self.selection_score is None else self.selection_score

    def hyperparameters(self) -> dict:
        return {"kind": self.kind, "eta": self.eta, "eps": self.eps, "alpha": self.alpha, "seed": self.seed}


def _fit_and_score(model, prepared: PreparedData, config: ExperimentConfig):
    reports = {k: evaluate(model, prepared.split, k, prepared.partition if prepared.fit is prepared.split else None)
               for k in config.k}
    sel = None
    if prepared.fit is not prepared.split:
        sel = evaluate(model, prepared.fit, config.select_k)["Rec"]
    return reports, sel


def run_single(
    config: ExperimentConfig,
    kind: str,
    eta: float,
    eps: float = 0.0,
    alpha: float = 0.0,
    seed: int = 0,
    warm_start: RunRecord | None = None,
    persist: bool = True,
    keep_model: bool = False,
) -> RunRecord:
    """Load, split, initialise, train, evaluate and persist one run.

    ``kind="bpr"`` trains ``t_bpr`` epochs.  ``kind="apr"`` trains
    ``t_bpr`` BPR epochs then APR up to ``t_apr``; with ``warm_start`` (a
    BPR record holding its model and summary) the BPR phase is reused.
    """
    if kind not in ("bpr", "apr"):
        raise ValueError(f"unknown kind {kind!r}")
    started = time.perf_counter()
    prepared = prepare_data(config)
    tr = prepared.fit.train
    t_apr = config.t_bpr if kind == "bpr" else config.t_apr
    sched = TrainSchedule(
        eta, config.t_bpr, t_apr, eps if kind == "apr" else 0.0, alpha if kind == "apr" else 0.0,
        config.l2, seed, config.normalization,
    )
    run_dir = Path(config.out) / "runs" / run_key(kind, eta, eps, alpha, seed) if persist else None
    tmp_dir = None
    trace_writer = None
    try:
        if persist:
            run_dir.parent.mkdir(parents=True, exist_ok=True)
            tmp_dir = Path(tempfile.mkdtemp(prefix=".tmp-", dir=run_dir.parent))
            if config.raw_trace:
                trace_writer = TraceWriter(tmp_dir / "trace.csv")
        if warm_start is not None and kind == "apr":
            if warm_start.model is None or warm_start.summary is None:
                raise ValueError("warm start record lacks model or summary")
            if warm_start.eta != eta or warm_start.seed != seed:
                raise ValueError("warm start must share eta and seed")
            model = warm_start.model.copy()
            summary = warm_start.summary.copy()
            first = config.t_bpr + 1
            if trace_writer is not None:
                log.info("raw trace of %s starts at epoch %d (warm start)", run_key(kind, eta, eps, alpha, seed), first)
        else:
            model = init_model(tr.num_users, tr.num_items, ModelConfig(config.f, config.init_std, seed))
            summary = SummarySink(prepared.partition)
            first = 1
        train(model, tr, sched, TeeSink(summary, trace_writer), prepared.partition, start_epoch=first)
        if trace_writer is not None:
            trace_writer.close()
        reports, sel = _fit_and_score(model, prepared, config)
        rec = RunRecord(kind, eta, eps if kind == "apr" else 0.0, alpha if kind == "apr" else 0.0, seed,
                        reports, prepared.fingerprint, run_dir, 0.0, sel, summary,
                        model if (keep_model or kind == "bpr") else None)
        rec.wall_time = time.perf_counter() - started + (warm_start.wall_time if warm_start is not None and kind == "apr" else 0.0)
        if persist:
            _write_run(rec, model, tmp_dir)
            if run_dir.exists():
                shutil.rmtree(run_dir)
            tmp_dir.rename(run_dir)
            tmp_dir = None
        return rec
    finally:
        if trace_writer is not None and not trace_writer._fh.closed:
            trace_writer.close()
        if tmp_dir is not None:
            shutil.rmtree(tmp_dir, ignore_errors=True)


def _write_run(rec: RunRecord, model: FactorModel, d: Path):
    save_model(model, d / "model.txt")
    write_report(rec.report, d)
    for k, r in rec.reports.items():
        if k != rec.k:
            (d / f"metrics_k{k}.json").write_text(r.to_json())
    if rec.summary is not None:
        write_magnitudes_csv(rec.summary.cdf, d / "magnitudes.csv")
        write_wineglass_csv(rec.summary.wine_glass(), d / "wineglass.csv")
    (d / "record.json").write_text(json.dumps(_record_meta(rec), indent=2) + "\n")


def write_report(report: MetricReport, d) -> None:
    d = Path(d)
    (d / "metrics.json").write_text(report.to_json())
    (d / "peruser.csv").write_text(report.peruser_csv())


def _record_meta(rec: RunRecord) -> dict:
    meta = rec.hyperparameters()
    meta.update(k=rec.k, fingerprint=rec.fingerprint, wall_time=round(rec.wall_time, 3),
                selection_score=rec.selection_score)
    return meta


def read_report(d) -> MetricReport:
    d = Path(d)
    obj = json.loads((d / "metrics.json").read_text())
    users, rec, ndcg = [], [], []
    pu = d / "peruser.csv"
    if pu.exists():
        with open(pu) as fh:
            for row in csv.DictReader(fh):
                users.append(int(row["user"]))
                rec.append(float(row["rec"]))
                ndcg.append(float(row["ndcg"]))
    values = {name: obj.get(name) for name in METRIC_ORDER if name in obj}
    return MetricReport(obj["k"], obj["n_users"], values, np.array(users, dtype=int), np.array(rec), np.array(ndcg))


def load_run(d) -> RunRecord:
    """Rebuild a record from a run directory (without model or live summary)."""
    d = Path(d)
    meta = json.loads((d / "record.json").read_text())
    report = read_report(d)
    rec = RunRecord(meta["kind"], meta["eta"], meta["eps"], meta["alpha"], meta["seed"], {report.k: report},
                    meta["fingerprint"], d, meta.get("wall_time", 0.0), meta.get("selection_score"))
    return rec


# ---------------------------------------------------------------- grid


@dataclass
class SeedResult:
    seed: int
    bpr: list[RunRecord]
    apr: list[RunRecord]
    best_bpr: RunRecord
    best_apr: RunRecord | None
    failed: dict[str, str] = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return len(self.bpr) + len(self.apr) + len(self.failed)


def _best(records: list[RunRecord]) -> RunRecord:
    # highest score; ties go to smaller eta, then eps, then alpha
    return min(records, key=lambda r: (-r.score, r.eta, r.eps, r.alpha))


def _cell(args):
    config, kind, eta, eps, alpha, seed, warm = args
    try:
        return run_single(config, kind, eta, eps, alpha, seed, warm_start=warm)
    except NumericalError as exc:
        # a diverging cell is a result of the grid, not a reason to stop it
        log.warning("%s diverged: %s", run_key(kind, eta, eps, alpha, seed), exc)
        return run_key(kind, eta, eps, alpha, seed), str(exc)


def _collect(outcomes, failed: dict) -> list[RunRecord]:
    ok = []
    for o in outcomes:
        if isinstance(o, RunRecord):
            ok.append(o)
        else:
            failed[o[0]] = o[1]
    return ok


def _map(jobs: int, cells: list) -> list:
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_cell, cells))
    return [_cell(c) for c in cells]


def grid_search(config: ExperimentConfig, jobs: int = 1) -> list[SeedResult]:
    """Per seed: BPR over the eta grid, then APR cells warm-started from the best BPR model.

    Returns one :class:`SeedResult` per seed with the selected runs.  Cells
    whose training diverges are listed in ``SeedResult.failed`` and skipped
    by the selection.
    """
    results = []
    for seed in config.seeds:
        failed: dict[str, str] = {}
        bpr = _collect(_map(jobs, [(config, "bpr", eta, 0.0, 0.0, seed, None) for eta in config.eta]), failed)
        if not bpr:
            raise NumericalError(f"every BPR run diverged for seed {seed}")
        best_bpr = _best(bpr)
        apr = []
        if config.t_apr > config.t_bpr:
            cells = [(config, "apr", best_bpr.eta, e, a, seed, best_bpr) for e in config.eps for a in config.alpha]
            apr = _collect(_map(jobs, cells), failed)
        for r in bpr:
            if r is not best_bpr:
                r.model = None
        results.append(SeedResult(seed, bpr, apr, best_bpr, _best(apr) if apr else None, failed))
        log.info("seed %d: best BPR %s (Rec %.4f), best APR %s", seed, best_bpr.key, best_bpr.score,
                 results[-1].best_apr.key if apr else "-")
    return results


# ---------------------------------------------------------------- compare


@dataclass
class ComparisonRow:
    metric: str
    base: float | None
    cand: float | None
    rv: float | None
    significant: bool
    p_value: float | None


@dataclass
class ComparisonTable:
    base_key: str
    cand_key: str
    k: int
    rows: list[ComparisonRow]

    def row(self, metric: str) -> ComparisonRow:
        return next(r for r in self.rows if r.metric == metric)

    def rv(self, metric: str) -> float | None:
        return self.row(metric).rv

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "base", "cand", "rv_pct", "significant", "p_value"])
        for r in self.rows:
            w.writerow([r.metric, _num(r.base), _num(r.cand), _num(r.rv), int(r.significant), _num(r.p_value)])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'metric':<9}{'base':>14}{'cand':>14}{'R.V.':>11}"
        lines = [f"{self.base_key} -> {self.cand_key} (k={self.k})", head, "-" * len(head)]
        for r in self.rows:
            star = "*" if r.significant else ""
            rv = "undefined" if r.rv is None else f"{r.rv:+.2f}%"
            lines.append(f"{r.metric:<9}{_fmt(r.base):>14}{_fmt(r.cand) + star:>14}{rv:>11}")
        return "\n".join(lines) + "\n"


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def _fmt(x) -> str:
    return "undefined" if x is None else f"{x:.4f}"


def compare(base: RunRecord, cand: RunRecord) -> ComparisonTable:
    """Metric-by-metric relative variation of ``cand`` against ``base``.

    Accuracy metrics get a significance flag from a paired t-test over the
    per-user vectors (Rec and Prec share the hit vector).
    """
    if base.fingerprint != cand.fingerprint:
        raise DataError("runs were evaluated on different splits")
    if base.k != cand.k:
        raise DataError(f"runs use different cutoffs ({base.k} vs {cand.k})")
    b, c = base.report, cand.report
    tests = {}
    if len(b.users) and np.array_equal(b.users, c.users) and len(b.users) >= 2:
        _, p_hit = paired_t_test(c.rec_per_user, b.rec_per_user)
        _, p_ndcg = paired_t_test(c.ndcg_per_user, b.ndcg_per_user)
        tests = {"Rec": p_hit, "Prec": p_hit, "nDCG": p_ndcg}
    rows = []
    for name in METRIC_ORDER:
        bv, cv = b.values.get(name), c.values.get(name)
        p = tests.get(name) if name in ACCURACY_METRICS else None
        rows.append(ComparisonRow(name, bv, cv, relative_variation(bv, cv), p is not None and p <= SIGNIFICANCE, p))
    return ComparisonTable(base.key, cand.key, b.k, rows)


# ---------------------------------------------------------------- attack


def adversarial_direction(model: FactorModel, split: TrainTestSplit, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the BPR loss over one sampled pass of D_F w.r.t. all of P and Q."""
    batch = sample_epoch(split.train, seed, 0)
    P, Q = model.P, model.Q
    pu = P[batch.users]
    qd = Q[batch.pos] - Q[batch.neg]
    x = np.einsum("nf,nf->n", pu, qd)
    w = np.where(x >= 0, np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))), 1 / (1 + np.exp(-np.abs(x))))
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    np.add.at(gP, batch.users, -w[:, None] * qd)
    np.add.at(gQ, batch.pos, -w[:, None] * pu)
    np.add.at(gQ, batch.neg, w[:, None] * pu)
    return gP, gQ


def attack_eval(model: FactorModel, split: TrainTestSplit, eps: float, k: int, seed: int = 0) -> MetricReport:
    """Metrics of ``Theta + Delta`` with ``Delta = eps * Gamma / ||Gamma||`` over all parameters.

    ``model`` is left untouched.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0:
        return evaluate(model, split, k)
    gP, gQ = adversarial_direction(model, split, seed)
    norm = float(np.sqrt(np.sum(gP * gP) + np.sum(gQ * gQ)))
    if norm == 0.0:
        log.warning("zero loss gradient; evaluating the unperturbed model")
        return evaluate(model, split, k)
    attacked = FactorModel(model.P + eps * gP / norm, model.Q + eps * gQ / norm)
    return evaluate(attacked, split, k)


# ---------------------------------------------------------------- export


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def export_reports(
    records: list[RunRecord],
    out_dir,
    config: ExperimentConfig | None = None,
    comparisons: list[tuple[RunRecord, RunRecord]] = (),
) -> dict[str, Path]:
    """Write per-run and aggregate reports below ``out_dir``.

    Per run (``<key>/``): metrics.json, peruser.csv, magnitudes.csv,
    wineglass.csv.  Aggregates: metrics.json (key -> metrics),
    comparison.csv (one block per compared pair) and manifest.json.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{out}: cannot create output directory ({exc})") from None
    written: dict[str, Path] = {}
    summary = {}
    for rec in records:
        d = out / rec.key
        d.mkdir(exist_ok=True)
        write_report(rec.report, d)
        files = ["metrics.json", "peruser.csv"]
        src = rec.run_dir
        if rec.summary is not None:
            write_magnitudes_csv(rec.summary.cdf, d / "magnitudes.csv")
            write_wineglass_csv(rec.summary.wine_glass(), d / "wineglass.csv")
            files += ["magnitudes.csv", "wineglass.csv"]
        elif src is not None:
            for name in ("magnitudes.csv", "wineglass.csv"):
                if (src / name).exists() and (src / name).resolve() != (d / name).resolve():
                    shutil.copyfile(src / name, d / name)
                    files.append(name)
        for name in files:
            written[f"{rec.key}/{name}"] = d / name
        summary[rec.key] = {k: v for k, v in json.loads(rec.report.to_json()).items()}

    (out / "metrics.json").write_text(_dump(summary))
    written["metrics.json"] = out / "metrics.json"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["base", "cand", "metric", "base_value", "cand_value", "rv_pct", "significant", "p_value"])
    for base, cand in comparisons:
        table = compare(base, cand)
        for r in table.rows:
            w.writerow([base.key, cand.key, r.metric, _num(r.base), _num(r.cand), _num(r.rv), int(r.significant), _num(r.p_value)])
    (out / "comparison.csv").write_text(buf.getvalue())
    written["comparison.csv"] = out / "comparison.csv"

    manifest = {
        "config_hash": config.hash() if config is not None else None,
        "config": config.as_dict() if config is not None else None,
        "seeds": sorted({r.seed for r in records}),
        "runs": {r.key: {**r.hyperparameters(), "wall_time": round(r.wall_time, 3), "fingerprint": r.fingerprint}
                 for r in records},
        "files": sorted(written),
    }
    (out / "manifest.json").write_text(_dump(manifest))
    written["manifest.json"] = out / "manifest.json"
    return written


def export_grid(results: list[SeedResult], config: ExperimentConfig, out_dir=None) -> dict[str, Path]:
    records = [r for s in results for r in (*s.bpr, *s.apr)]
    pairs = [(s.best_bpr, s.best_apr) for s in results if s.best_apr is not None]
    return export_reports(records, out_dir or Path(config.out) / "report", config, pairs)


def persist_split(config: ExperimentConfig) -> Path:
    prepared = prepare_data(config)
    d = Path(config.out) / "split"
    save_split(prepared.split, d)
    return d


def summary_from_dir(d) -> tuple:
    """``(MagnitudeCdf, WineGlassSeries)`` read back from a run directory."""
    d = Path(d)
    return read_magnitudes_csv(d / "magnitudes.csv"), read_wineglass_csv(d / "wineglass.csv")
