import json

import numpy as np
import pytest

from aprlab.data import generate_synthetic, load_split, write_interactions
from aprlab.errors import DataError
from aprlab.experiment import (
    ExperimentConfig,
    RunRecord,
    _best,
    attack_eval,
    compare,
    export_grid,
    export_reports,
    grid_search,
    load_run,
    parse_config,
    prepare_data,
    run_key,
    run_single,
    summary_from_dir,
)
from aprlab.instrumentation import read_trace
from aprlab.metrics import evaluate
from aprlab.model import load_model


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("syn")
    ds = generate_synthetic(60, 80, 1500, 0.6, seed=1)
    write_interactions(ds, d / "interactions.tsv")
    return d / "interactions.tsv"


def small_config(data_file, out, **kw):
    base = dict(dataset=str(data_file), f=8, k=(10,), eta=(0.05, 0.1), eps=(0.1, 1.0), alpha=(0.1, 1.0),
                t_bpr=6, t_apr=10, seeds=(0,), out=str(out))
    base.update(kw)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------- config


def test_config_defaults_are_paper_grid():
    c = ExperimentConfig()
    assert c.eta == (0.005, 0.01, 0.05)
    assert c.eps == (0.001, 0.01, 0.1, 1.0)
    assert c.alpha == (0.001, 0.01, 0.1, 1.0, 10.0)
    assert (c.f, c.k, c.t_bpr, c.t_apr, c.l2) == (64, (50,), 100, 200, 0.0)


def test_parse_config(tmp_path):
    text = """
    # comment
    dataset = data.tsv
    eta = 0.01, 0.05   # trailing comment
    k = 10, 50
    t_bpr = 5
    raw_trace = yes
    """
    c = parse_config(text, {"t_apr": 9}, base_dir=tmp_path)
    assert c.dataset == str(tmp_path / "data.tsv")
    assert c.eta == (0.01, 0.05) and c.k == (10, 50)
    assert (c.t_bpr, c.t_apr, c.raw_trace) == (5, 9, True)
    assert c.select_k == 50


@pytest.mark.parametrize("text", ["bogus = 1", "eta 0.1", "eta = ", "t_bpr = 5\nt_apr = 2", "selection = best"])
def test_parse_config_errors(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_config_hash_changes_with_any_field():
    base = ExperimentConfig()
    seen = {base.hash()}
    for name, value in [("f", 32), ("eta", (0.1,)), ("t_apr", 150), ("l2", 1e-4), ("seeds", (5,)),
                        ("out", "x"), ("normalization", "per_row"), ("selection", "validation")]:
        c = ExperimentConfig(**{name: value})
        assert c.hash() not in seen
        seen.add(c.hash())
    assert ExperimentConfig().hash() == base.hash()


def test_run_key_unique():
    keys = {run_key(k, e, x, a, s) for k in ("apr",) for e in (0.005, 0.05) for x in (0.001, 0.01)
            for a in (0.1, 1.0) for s in (0, 1)}
    assert len(keys) == 16
    assert run_key("bpr", 0.05, 1, 1, 2) == "bpr_eta0.05_seed2"


# ---------------------------------------------------------------- runs


def test_run_single_bpr(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path, raw_trace=True)
    rec = run_single(cfg, "bpr", 0.05, seed=0)
    d = rec.run_dir
    for name in ("model.txt", "metrics.json", "peruser.csv", "magnitudes.csv", "wineglass.csv", "record.json", "trace.csv"):
        assert (d / name).exists(), name
    trace = read_trace(d / "trace.csv")
    assert all(r.omega_adv is None for r in trace)
    assert {r.epoch for r in trace} == set(range(1, 7))
    # stored metrics are recomputable from the stored model and split
    split = prepare_data(cfg).split
    again = evaluate(load_model(d / "model.txt"), split, 10)
    stored = json.loads((d / "metrics.json").read_text())
    for name, v in again.values.items():
        assert v is None and stored[name] is None or abs(v - stored[name]) <= 1e-9
    assert not list(tmp_path.glob("runs/.tmp-*"))


def test_run_single_deterministic(tmp_path, data_file):
    a = run_single(small_config(data_file, tmp_path / "a"), "apr", 0.05, 0.5, 1.0, seed=3)
    b = run_single(small_config(data_file, tmp_path / "b"), "apr", 0.05, 0.5, 1.0, seed=3)
    for name in ("metrics.json", "model.txt", "magnitudes.csv", "wineglass.csv"):
        assert (a.run_dir / name).read_bytes() == (b.run_dir / name).read_bytes()


def test_run_single_failure_leaves_nothing(tmp_path, data_file):
    from aprlab.errors import NumericalError

    cfg = small_config(data_file, tmp_path)
    with pytest.raises(NumericalError):
        run_single(cfg, "bpr", 1e200)
    assert not (tmp_path / "runs" / run_key("bpr", 1e200, 0, 0, 0)).exists()
    assert not list((tmp_path / "runs").glob(".tmp-*"))


def test_run_single_missing_dataset(tmp_path):
    with pytest.raises(DataError):
        run_single(ExperimentConfig(dataset=str(tmp_path / "none.tsv"), out=str(tmp_path)), "bpr", 0.1)


def test_warm_start_matches_cold_run(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    bpr = run_single(cfg, "bpr", 0.05, seed=1, persist=False)
    warm = run_single(cfg, "apr", 0.05, 1.0, 0.1, seed=1, warm_start=bpr, persist=False, keep_model=True)
    cold = run_single(cfg, "apr", 0.05, 1.0, 0.1, seed=1, persist=False, keep_model=True)
    assert warm.model.P.tobytes() == cold.model.P.tobytes()
    assert warm.summary.updates == cold.summary.updates


def test_validation_selection_mode(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path, selection="validation")
    rec = run_single(cfg, "bpr", 0.05, persist=False)
    assert rec.selection_score is not None
    assert rec.score == rec.selection_score


# ---------------------------------------------------------------- grid


def test_grid_cardinality_and_selection(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path, seeds=(0, 1))
    results = grid_search(cfg)
    for res in results:
        assert len(res.bpr) == 2 and len(res.apr) == 4 and res.n_runs == 6
        assert res.best_bpr.score == max(r.score for r in res.bpr)
        assert res.best_apr.score == max(r.score for r in res.apr)
        assert all(r.eta == res.best_bpr.eta for r in res.apr)
    assert len(list((tmp_path / "runs").iterdir())) == 12


def test_grid_parallel_matches_serial(tmp_path, data_file):
    a = grid_search(small_config(data_file, tmp_path / "a"), jobs=1)
    b = grid_search(small_config(data_file, tmp_path / "b"), jobs=2)
    for ra, rb in zip(a, b):
        for x, y in zip(ra.bpr + ra.apr, rb.bpr + rb.apr):
            assert x.key == y.key
            assert (x.run_dir / "metrics.json").read_bytes() == (y.run_dir / "metrics.json").read_bytes()


def test_grid_single_point(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path, eta=(0.05,), eps=(0.5,), alpha=(1.0,))
    (res,) = grid_search(cfg)
    assert len(res.bpr) == 1 and len(res.apr) == 1


def test_grid_records_diverging_cells(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path, eta=(0.05,), eps=(1.0,), alpha=(0.1, 1e12))
    (res,) = grid_search(cfg)
    assert len(res.apr) == 1 and len(res.failed) == 1
    assert "alpha1e+12" in next(iter(res.failed))


def _fake(score, eta, eps=0.0, alpha=0.0):
    r = RunRecord("apr", eta, eps, alpha, 0, {}, "x")
    r.selection_score = score
    return r


def test_best_tie_breaks_and_scale_invariance():
    cands = [_fake(0.3, 0.05, 0.1, 1.0), _fake(0.3, 0.01, 1.0, 1.0), _fake(0.3, 0.01, 0.1, 10.0), _fake(0.2, 0.005)]
    best = _best(cands)
    assert (best.eta, best.eps, best.alpha) == (0.01, 0.1, 10.0)
    for r in cands:
        r.selection_score *= 7.5
    assert _best(cands) is best


# ---------------------------------------------------------------- compare


def test_compare_self_and_swap(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    a = run_single(cfg, "bpr", 0.05)
    b = run_single(cfg, "apr", 0.05, 1.0, 1.0)
    same = compare(a, a)
    assert all(r.rv in (0.0, None) and not r.significant for r in same.rows)
    ab, ba = compare(a, b), compare(b, a)
    assert [r.metric for r in ab.rows][:8] == ["Rec", "Prec", "nDCG", "Nov", "Cov%", "ARP", "APLT", "ACLT"]
    for r in ab.rows:
        x, y = r.rv, ba.rv(r.metric)
        if x is not None and y is not None and x != -100:
            assert y == pytest.approx(100 * (1 / (1 + x / 100) - 1), rel=1e-9, abs=1e-9)
    csv = ab.to_csv().splitlines()
    assert csv[0] == "metric,base,cand,rv_pct,significant,p_value" and len(csv) == 15
    assert "R.V." in ab.to_text()
    # rebuilt from disk gives the same table
    assert compare(load_run(a.run_dir), load_run(b.run_dir)).to_csv() == ab.to_csv()


def test_compare_refuses_mismatch(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    a = run_single(cfg, "bpr", 0.05)
    other = tmp_path / "other.tsv"
    write_interactions(generate_synthetic(60, 80, 1500, 0.6, seed=2), other)
    b = run_single(small_config(other, tmp_path / "o"), "bpr", 0.05)
    with pytest.raises(DataError):
        compare(a, b)
    c = run_single(small_config(data_file, tmp_path / "k", k=(20,)), "bpr", 0.05)
    with pytest.raises(DataError):
        compare(a, c)


def test_significance_star(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    a = run_single(cfg, "bpr", 0.05)
    b = run_single(cfg, "apr", 0.05, 1.0, 1.0)
    t = compare(a, b)
    for r in t.rows:
        if r.metric in ("Rec", "Prec", "nDCG"):
            assert r.p_value is not None and r.significant == (r.p_value <= 0.05)
        else:
            assert r.p_value is None and not r.significant


# ---------------------------------------------------------------- attack


def test_attack_eps_zero_is_clean(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    rec = run_single(cfg, "bpr", 0.05, persist=False)
    split = prepare_data(cfg).split
    clean = evaluate(rec.model, split, 10)
    assert attack_eval(rec.model, split, 0.0, 10).values == clean.values


def test_attack_leaves_model_and_moves_budget(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    rec = run_single(cfg, "bpr", 0.05, persist=False)
    split = prepare_data(cfg).split
    P0 = rec.model.P.copy()
    from aprlab.experiment import adversarial_direction

    gP, gQ = adversarial_direction(rec.model, split)
    assert np.sqrt((gP ** 2).sum() + (gQ ** 2).sum()) > 0
    attack_eval(rec.model, split, 2.0, 10)
    assert np.array_equal(rec.model.P, P0)


def test_attack_direction_matches_finite_difference(tmp_path, data_file):
    from aprlab.experiment import adversarial_direction
    from aprlab.model import FactorModel
    from aprlab.trainers import bpr_loss, sample_epoch

    cfg = small_config(data_file, tmp_path)
    split = prepare_data(cfg).split
    rng = np.random.default_rng(0)
    M, N = split.train.num_users, split.train.num_items
    model = FactorModel(rng.normal(size=(M, 2)), rng.normal(size=(N, 2)))
    gP, gQ = adversarial_direction(model, split, seed=0)
    batch = sample_epoch(split.train, 0, 0)
    for mat, grad in ((model.P, gP), (model.Q, gQ)):
        for _ in range(5):
            r, c = int(rng.integers(mat.shape[0])), int(rng.integers(2))
            old = mat[r, c]
            mat[r, c] = old + 1e-5
            up = bpr_loss(model, batch)
            mat[r, c] = old - 1e-5
            dn = bpr_loss(model, batch)
            mat[r, c] = old
            assert (up - dn) / 2e-5 == pytest.approx(grad[r, c], rel=1e-4, abs=1e-7)


# ---------------------------------------------------------------- export


def test_export_files_and_byte_identity(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path, eta=(0.05,), eps=(1.0,), alpha=(1.0,))
    results = grid_search(cfg)
    w1 = export_grid(results, cfg, tmp_path / "r1")
    w2 = export_grid(results, cfg, tmp_path / "r2")
    assert all(p.exists() for p in w1.values())
    for key in w1:
        assert w1[key].read_bytes() == w2[key].read_bytes(), key
    manifest = json.loads((tmp_path / "r1" / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.hash()
    assert manifest["seeds"] == [0]
    assert all("wall_time" in v for v in manifest["runs"].values())
    assert set(manifest["files"]) | {"manifest.json"} == set(w1)
    cdf, wg = summary_from_dir(tmp_path / "r1" / results[0].best_apr.key)
    assert len(wg.epochs) == cfg.t_apr


def test_export_from_loaded_runs(tmp_path, data_file):
    cfg = small_config(data_file, tmp_path)
    a = run_single(cfg, "bpr", 0.05)
    b = run_single(cfg, "apr", 0.05, 1.0, 1.0)
    recs = [load_run(a.run_dir), load_run(b.run_dir)]
    written = export_reports(recs, tmp_path / "rep", cfg, [(recs[0], recs[1])])
    assert (tmp_path / "rep" / a.key / "wineglass.csv").exists()
    assert "comparison.csv" in written


def test_export_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        export_reports([], blocker / "sub")


def test_persisted_split_reloads(tmp_path, data_file):
    from aprlab.experiment import persist_split

    cfg = small_config(data_file, tmp_path)
    d = persist_split(cfg)
    back = load_split(d)
    assert back.test == prepare_data(cfg).split.test
