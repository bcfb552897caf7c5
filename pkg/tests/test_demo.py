import csv
from dataclasses import replace

import numpy as np
import pytest

from ecomoe import demo as demo_mod
from ecomoe.demo import (SWEEP_COLUMNS, EvoByDemoMode, PretrainError, apply_mode, build_mode,
                         list_demos, load_demo, pretrain_expert, regression_gate, sweep_cells)
from ecomoe.genome import ConfigError
from ecomoe.morphogen import LatentPrior, decode, morph_metrics, morphology_distance
from ecomoe.policy import MixturePolicy

TINY_SWEEP = {"w_stand": [0.005], "w_height": [0.005], "w_act": [1e-4],
              "actor_lr": [1e-3, 1e-4], "critic_lr": [1e-3], "gae_lambda": [0.95]}


def tiny(name="radial_quadruped"):
    return replace(load_demo(name), clones=2, horizon=15, budget=2)


def test_shipped_demos_load():
    names = list_demos()
    assert {"radial_quadruped", "bilateral_quadruped_4dof", "bilateral_quadruped_8dof"} <= set(names)
    for n in names:
        d = load_demo(n)
        assert d.reward_weights.w_move == 1.0
        assert d.pretrain_config.gamma == 0.99


def test_radial_demo_is_symmetric():
    mm = morph_metrics(load_demo("radial_quadruped").morphology)
    assert mm.n_eff == pytest.approx(4.0, abs=1e-3)
    assert mm.mass_bias_magnitude <= 0.05
    assert morphology_distance(load_demo("radial_quadruped").morphology, decode(np.zeros(16))) < 1e-9


def test_bilateral_demos_differ_from_radial():
    a = load_demo("bilateral_quadruped_4dof").morphology
    b = load_demo("bilateral_quadruped_8dof").morphology
    assert a.n_joints == 4 and b.n_joints == 8
    assert morph_metrics(a).mass_bias_magnitude > 1e-3
    assert morph_metrics(a).n_eff < 4.0 - 1e-3


def test_unknown_demo():
    with pytest.raises(ConfigError):
        load_demo("no_such_body")


def test_sweep_grid():
    cells = sweep_cells()
    assert len(cells) == (3 * 3 * 2) * (3 * 3 * 4)
    assert all(c["w_move"] == 1.0 for c in cells)
    assert len({tuple(sorted((k, str(v)) for k, v in c.items())) for c in cells}) == len(cells)
    with pytest.raises(ConfigError):
        sweep_cells({"w_move": [0.5]})


def test_pretrain_argmax_and_csv(tmp_path):
    path = tmp_path / "sweep.csv"
    expert, rows = pretrain_expert(tiny(), TINY_SWEEP, seed=0, csv_path=path, hidden=8)
    assert len(rows) == 2
    best = [r for r in rows if r["selected"]]
    assert len(best) == 1
    assert all(best[0]["mean_return"] >= r["mean_return"] for r in rows if r["stable"])
    with path.open() as fh:
        read = list(csv.DictReader(fh))
    assert list(read[0]) == SWEEP_COLUMNS and len(read) == 2
    assert not expert.frozen


def test_pretrain_all_diverged(monkeypatch):
    monkeypatch.setattr(demo_mod, "evaluate_expert", lambda *a, **k: (float("nan"), 0.0, False))
    with pytest.raises(PretrainError) as info:
        pretrain_expert(tiny(), TINY_SWEEP, hidden=8)
    assert len(info.value.report) == 2


def test_regression_gate_logic(monkeypatch):
    d = tiny()
    expert = MixturePolicy.create(1, 16, 8).experts[0]
    results = iter([(0.0, 0.30, True), (0.0, 0.10, True)])
    monkeypatch.setattr(demo_mod, "evaluate_expert", lambda *a, **k: next(results))
    assert regression_gate(d, expert)[0]
    results = iter([(0.0, 0.15, True), (0.0, 0.10, True)])
    assert not regression_gate(d, expert)[0]
    results = iter([(0.0, 0.005, True), (0.0, 0.0, True)])
    assert not regression_gate(d, expert)[0]


@pytest.fixture
def fast_pretrain(monkeypatch):
    def fake(demo, sweep=None, budget=None, seed=0, csv_path=None, latent_dim=16, hidden=64):
        return MixturePolicy.create(1, latent_dim, hidden, seed=77).experts[0], []
    monkeypatch.setattr(demo_mod, "pretrain_expert", fake)


def test_predesign_only(fast_pretrain):
    d = tiny()
    mode = build_mode("PredesignOnly", d, restarts=2, seed=0, hidden=8)
    assert mode.prior is not None and mode.pretrained is None
    assert d.reference is not None
    pol = MixturePolicy.create(4, 16, 8)
    run = apply_mode(mode, pol, 16)
    assert not run.augment and run.frozen_digest is None
    assert np.array_equal(run.dist.mean, mode.prior.mean)
    np.testing.assert_array_equal(run.dist.sigma, mode.prior.sigma)


def test_pretrain_only(fast_pretrain):
    mode = build_mode("PretrainOnly", tiny(), hidden=8, check_gate=False)
    assert mode.prior is None and mode.pretrained is not None and mode.alpha == 2.0
    run = apply_mode(mode, MixturePolicy.create(4, 16, 8), 16, base_sigma=0.5)
    assert run.policy.experts[0].frozen and run.augment
    assert run.frozen_digest == mode.pretrained.digest()
    assert np.array_equal(run.dist.mean, np.zeros(16))
    assert np.all(run.dist.sigma == 0.5)


def test_co_steering(fast_pretrain):
    mode = build_mode("CoSteering", tiny(), restarts=2, hidden=8, check_gate=False)
    run = apply_mode(mode, MixturePolicy.create(4, 16, 8), 16)
    assert run.policy.experts[0].frozen
    assert np.array_equal(run.dist.mean, mode.prior.mean)


def test_build_mode_propagates_gate_failure(fast_pretrain, monkeypatch):
    monkeypatch.setattr(demo_mod, "regression_gate", lambda *a, **k: (False, 0.0, 0.0))
    with pytest.raises(PretrainError):
        build_mode("PretrainOnly", tiny(), hidden=8)


def test_no_mode_is_plain_run():
    run = apply_mode(None, MixturePolicy.create(4, 16, 8), 16)
    assert not run.augment and run.alpha == 1.0


def test_inconsistent_modes():
    prior = LatentPrior(np.zeros(16), np.ones(16))
    expert = MixturePolicy.create(1, 16, 8).experts[0]
    with pytest.raises(ConfigError):
        EvoByDemoMode("CoSteering", prior=prior).validate()
    with pytest.raises(ConfigError):
        EvoByDemoMode("PredesignOnly", pretrained=expert, prior=prior).validate()
    with pytest.raises(ConfigError):
        build_mode("Mystery", tiny())
    with pytest.raises(ConfigError):
        apply_mode(EvoByDemoMode("PretrainOnly"), MixturePolicy.create(4, 16, 8), 16)
