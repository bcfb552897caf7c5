import csv
import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecomoe.genome import ConfigError
from ecomoe.harness import analytics as an
from ecomoe.harness.cli import main
from ecomoe.harness.config import ExperimentConfig, dump_config, load_config, parse_config
from ecomoe.harness.experiment import load_records, run_experiment, seed_dirs, strip_volatile
from ecomoe.harness.report import ParityError, compare, emit_report

SMOKE = """
[experiment]
task = Flat Ground
method = {method}
generations = {gens}
pop_size = 4
elites = 1
seeds = 0, 1
horizon = 12
[ppo]
steps_per_epoch = 1
batch_size = 24
"""


def smoke_cfg(method="ecomoe", gens=8, **kw):
    return parse_config(SMOKE.format(method=method, gens=gens)).with_overrides(**kw)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "moe"
    run_experiment(smoke_cfg(), out)
    return out


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "base"
    run_experiment(smoke_cfg("baseline", gens=3), out)
    return out


# ----------------------------------------------------------------- config

def test_parse_and_round_trip():
    cfg = parse_config(SMOKE.format(method="ECoMoE", gens=3) + "[physics]\nw_up = 0.02\n")
    assert cfg.task == "flat" and cfg.method == "ecomoe" and cfg.seeds == (0, 1)
    assert cfg.w_up == 0.02 and cfg.ppo.steps_per_epoch == 1 and cfg.ppo.gae_lambda is None
    assert parse_config(dump_config(cfg)) == cfg


def test_demo_section_round_trip():
    text = SMOKE.format(method="evo_by_demo", gens=2) + \
        "[demo]\nname = radial_quadruped\nvariant = PredesignOnly\nrestarts = 4\n" \
        "sweep_actor_lr = 0.001, 0.0001\nsweep_gae_lambda = 0.95, none\n"
    cfg = parse_config(text)
    assert cfg.demo.sweep["gae_lambda"] == [0.95, None]
    assert parse_config(dump_config(cfg)) == cfg


@pytest.mark.parametrize("bad", [
    "[experiment]\nexperts = 0\n",
    "[experiment]\ngenerations = 0\n",
    "[experiment]\nseeds = \n",
    "[experiment]\ntask = moon\n",
    "[experiment]\nbogus = 1\n",
    "[ppo]\nclip = 0.1\n",
    "[experiment]\npop_size = many\n",
    "[experiment]\nmethod = evo_by_demo\n",
    "not an ini",
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_baseline_has_one_expert():
    assert smoke_cfg("baseline").n_experts == 1
    assert smoke_cfg().n_experts == 4


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


# -------------------------------------------------------------- analytics

def test_cumulative_max_examples():
    recs = [{"fitness": [v]} for v in (1.0, 3.0, 2.0)]
    np.testing.assert_array_equal(an.cumulative_max_mean_fitness(recs), [1, 3, 3])
    np.testing.assert_array_equal(an.cumulative_max_mean_fitness(recs[:1]), [1.0])
    recs = [{"fitness": [None, 2.0, 4.0]}, {"fitness": [None, None]}]
    np.testing.assert_array_equal(an.cumulative_max_mean_fitness(recs), [3.0, 3.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-10, 10), min_size=1, max_size=5), min_size=1, max_size=12))
def test_cumulative_max_is_nondecreasing(pops):
    s = an.cumulative_max_mean_fitness([{"fitness": p} for p in pops])
    assert np.all(np.diff(s) >= 0)


def bootstrap_oracle(values, n_resamples, level, seed):
    """Row-by-row resampling and hand-rolled linear-interpolated percentiles."""
    x = list(values)
    n = len(x)
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        means.append(sum(x[i] for i in idx) / n)
    means.sort()

    def pct(p):
        h = (len(means) - 1) * p
        lo = int(np.floor(h))
        hi = min(lo + 1, len(means) - 1)
        return means[lo] + (h - lo) * (means[hi] - means[lo])
    a = (1 - level) / 2
    return pct(a), pct(1 - a)


def test_bootstrap_matches_second_implementation():
    vals = [0.3, 1.7, -0.4, 2.2, 0.9]
    mean, lo, hi = an.bootstrap_ci(vals, 1000, 0.95, seed=3)
    olo, ohi = bootstrap_oracle(vals, 1000, 0.95, 3)
    assert mean == pytest.approx(np.mean(vals))
    assert abs(lo - olo) <= 1e-9 and abs(hi - ohi) <= 1e-9
    assert lo <= mean <= hi


def test_bootstrap_single_value_is_degenerate():
    assert an.bootstrap_ci([2.5]) == (2.5, 2.5, 2.5)


def test_pca_axis_aligned(rng):
    X = np.column_stack([rng.normal(scale=3, size=200), rng.normal(scale=1, size=200)])
    X -= X.mean(0)
    X[:, 1] -= (X[:, 0] @ X[:, 1]) / (X[:, 0] @ X[:, 0]) * X[:, 0]   # exactly uncorrelated
    p = an.pca_fit(X)
    np.testing.assert_allclose(p.components[0], [1.0, 0.0], atol=1e-8)
    assert p.eigenvalues[0] > p.eigenvalues[1]


def test_pca_against_dense_eigensolver():
    r = np.random.default_rng(4)
    A = r.normal(size=(16, 16)) * np.linspace(3, 0.2, 16)
    X = r.normal(size=(300, 16)) @ A.T
    p = an.pca_fit(X)
    C = np.cov(X.T, bias=True)
    w, V = np.linalg.eigh(C)
    w, V = w[::-1], V[:, ::-1]
    np.testing.assert_allclose(p.eigenvalues, w[:2], rtol=1e-8)
    for k in range(2):
        assert abs(p.components[k] @ V[:, k]) == pytest.approx(1.0, abs=1e-8)
        nz = np.flatnonzero(np.abs(p.components[k]) > 1e-12)[0]
        assert p.components[k][nz] > 0
    assert p.explained == pytest.approx(w[:2].sum() / w.sum(), rel=1e-8)
    Y = p.project(X)
    assert (Y ** 2).sum() / X.shape[0] == pytest.approx(w[:2].sum(), rel=1e-8)


def test_pca_duplication_invariance(rng):
    X = rng.normal(size=(40, 6)) * [5, 3, 2, 1, 1, 1]
    a = an.pca_fit(X)
    b = an.pca_fit(np.concatenate([X, X]))
    np.testing.assert_allclose(a.project(X), b.project(X), atol=1e-9)


def test_pca_rank_deficient(rng):
    t = rng.normal(size=30)
    X = np.outer(t, rng.normal(size=5))
    p = an.pca_fit(X)
    assert p.rank_deficient
    assert np.all(p.components[1] == 0)
    with pytest.raises(ValueError):
        an.pca_fit(X[:1])


def test_expert_usage_views():
    u = an.expert_usage_stats([np.full((5, 4), 0.25)])
    np.testing.assert_allclose(u["rank"][0], 0.25)
    np.testing.assert_allclose(u["index"][0], 0.25)
    onehot = np.eye(4)[[0, 1, 2, 3, 1]]
    u = an.expert_usage_stats([onehot])
    np.testing.assert_array_equal(u["rank"][0], [1, 0, 0, 0])
    np.testing.assert_allclose(u["index"][0], [0.2, 0.4, 0.2, 0.2])
    assert u["collapsed"] == [False]


def test_collapse_detector():
    r = np.random.default_rng(0)
    collapsed = np.column_stack([np.full(30, 0.97), np.full((30, 3), 0.01)])
    assert an.expert_usage_stats([collapsed])["collapsed"] == [True]
    spread = r.dirichlet(np.ones(4), size=30)
    assert not an.is_collapsed(spread)
    assert an.mean_pairwise_gate_distance(collapsed) == 0.0
    assert an.mean_pairwise_gate_distance(spread) > 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 1000))
def test_usage_rows_on_simplex(k, n, seed):
    W = np.random.default_rng(seed).dirichlet(np.ones(k), size=n)
    u = an.expert_usage_stats([W, W[::-1]])
    assert np.all(np.abs(u["rank"].sum(1) - 1) <= 1e-6)
    assert np.all(np.abs(u["index"].sum(1) - 1) <= 1e-6)


# ------------------------------------------------------------- experiment

def test_two_seeds_eight_generations(smoke_run):
    dirs = seed_dirs(smoke_run)
    assert [d.name for d in dirs] == ["seed_0", "seed_1"]
    for d in dirs:
        recs = load_records(d)
        assert len(recs) == 8
        assert [r["gen"] for r in recs] == list(range(8))
        assert all(r["ppo_epochs"] == 5 * (i + 1) for i, r in enumerate(recs))
        meta = json.loads((d / "meta.json").read_text())
        assert meta["experts"] == 4 and meta["hidden"] == 64
    assert (smoke_run / "report" / "fitness.csv").exists()


def test_stored_curve_recomputes_from_raw_fitness(smoke_run):
    with (smoke_run / "report" / "fitness.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    for seed_dir in seed_dirs(smoke_run):
        recs = load_records(seed_dir)
        best = -np.inf
        for g, r in enumerate(recs):
            vals = [f for f in r["fitness"] if f is not None]
            best = max(best, sum(vals) / len(vals))
            assert abs(float(rows[g][seed_dir.name]) - best) <= 1e-12


def test_resume_after_kill_matches(smoke_run, tmp_path):
    out = tmp_path / "resumed"
    cfg = smoke_cfg()
    run_experiment(cfg, out, stop_after=5, report=False)
    assert len(load_records(out / "seed_0")) == 5
    # a half-written record past the checkpoint must be discarded
    with (out / "seed_0" / "records.jsonl").open("a") as fh:
        fh.write('{"gen": 5, "partial": true}\n')
    assert main(["resume", "--out", str(out)]) == 0
    for s in ("seed_0", "seed_1"):
        a = [strip_volatile(r) for r in load_records(smoke_run / s)]
        b = [strip_volatile(r) for r in load_records(out / s)]
        assert a == b


def test_baseline_run_has_no_gate_stats(baseline_run):
    for d in seed_dirs(baseline_run):
        recs = load_records(d)
        assert all(r["gate_weights_per_design"] is None for r in recs)
        assert json.loads((d / "meta.json").read_text())["experts"] == 1
    assert not (baseline_run / "report" / "expert_usage.csv").exists()


def test_run_refuses_other_config(smoke_run):
    with pytest.raises(ConfigError):
        run_experiment(smoke_cfg(gens=9), smoke_run)


# ----------------------------------------------------------------- report

def test_report_csvs_are_byte_identical(smoke_run, tmp_path):
    a = emit_report(an.build_bundle(smoke_run, label="x"), tmp_path / "a")
    b = emit_report(an.build_bundle(smoke_run, label="x"), tmp_path / "b")
    for fa, fb in zip(a, b):
        assert fa.read_bytes() == fb.read_bytes(), fa.name
    names = {f.name for f in a}
    assert {"fitness.csv", "pca.csv", "metrics.csv", "expert_usage.csv", "fitness.svg",
            "pca.svg", "expert_usage.svg"} <= names
    with (tmp_path / "a" / "expert_usage.csv").open() as fh:
        for row in csv.DictReader(fh):
            assert abs(sum(float(row[f"rank_{k}"]) for k in range(4)) - 1) <= 1e-6
            assert abs(sum(float(row[f"index_{k}"]) for k in range(4)) - 1) <= 1e-6


def test_bundle_invariants(smoke_run):
    b = an.build_bundle(smoke_run)
    assert b.generations == 8 and all(len(s.cummax) == 8 for s in b.seeds)
    assert np.all(b.fitness_lo <= b.fitness_mean + 1e-12)
    assert np.all(b.fitness_mean <= b.fitness_hi + 1e-12)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_report_dir(smoke_run, tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    with pytest.raises(OSError):
        emit_report(an.build_bundle(smoke_run), d)


def test_report_into_a_file_path_fails(smoke_run, tmp_path):
    f = tmp_path / "file"
    f.write_text("")
    with pytest.raises(OSError):
        emit_report(an.build_bundle(smoke_run), f / "sub")


def test_compare(smoke_run, baseline_run, tmp_path):
    res = compare(baseline_run, smoke_run, tmp_path / "cmp")
    assert res["paired_seeds"] == [0, 1] and res["generations"] == 3
    assert res["experts_a"] == 1 and res["experts_b"] == 4
    assert res["policy_params_b"] <= res["policy_params_a"]
    for f in ("stats.csv", "fitness_ci.svg", "pca.svg", "compare.json"):
        assert (tmp_path / "cmp" / f).exists()


def test_compare_rejects_critic_mismatch(smoke_run, baseline_run, tmp_path):
    other = tmp_path / "other"
    shutil.copytree(baseline_run, other)
    for d in seed_dirs(other):
        meta = json.loads((d / "meta.json").read_text())
        meta["critic_params"] += 1
        (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ParityError):
        compare(other, smoke_run, tmp_path / "cmp")


# -------------------------------------------------------------------- cli

def test_cli_run_and_report(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text(SMOKE.format(method="ecomoe", gens=2))
    out = tmp_path / "run"
    assert main(["run", "--config", str(ini), "--seed", "3", "--out", str(out)]) == 0
    assert [d.name for d in seed_dirs(out)] == ["seed_3"]
    assert main(["report", "--run", str(out), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "fitness.csv").exists()


def test_cli_exit_codes(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[experiment]\nexperts = 0\n")
    assert main(["run", "--config", str(ini)]) == 2
    assert main(["resume", "--out", str(tmp_path)]) == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", "--run", str(empty)]) == 3
    assert main(["compare", "--a", str(empty), "--b", str(empty)]) == 3


def test_cli_dump_trajectory(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(SMOKE.format(method="baseline", gens=1))
    out = tmp_path / "run"
    assert main(["run", "--config", str(ini), "--out", str(out), "--dump-traj", "--no-report"]) == 0
    lines = (out / "seed_0" / "best_trajectory.jsonl").read_text().splitlines()
    assert len(lines) == 13 and "com" in json.loads(lines[1])


def test_cli_encode_demo(tmp_path):
    out = tmp_path / "enc"
    assert main(["encode-demo", "--demo", "radial_quadruped", "--restarts", "2",
                 "--out", str(out)]) == 0
    prior = json.loads((out / "prior.json").read_text())
    assert len(prior["mean"]) == 16 and prior["restarts"] == 2


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.ini")),
                         ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert parse_config(dump_config(cfg)) == cfg
