"""Acceptance gate: one test per criterion, each with its runtime budget.

The conftest hook prints a PASS/FAIL line per criterion after the run.
"""
import json
import math
import time

import numpy as np
import pytest

from ecomoe import autograd as ag
from ecomoe.demo import load_demo
from ecomoe.genome import ScoredGenotype, cma_update, init_distribution
from ecomoe.harness.analytics import cumulative_max_mean_fitness, mean_pairwise_gate_distance
from ecomoe.harness.config import parse_config
from ecomoe.harness.experiment import load_records, run_experiment, strip_volatile
from ecomoe.harness.report import compare
from ecomoe.learn import (Batch, CriticParams, Optimizers, PPOConfig, actor_loss, augmented_fitness,
                          critic_loss, gae, ppo_update)
from ecomoe.morphogen import decode, effective_limb_count, encode_by_search, morph_metrics, \
    morphology_distance
from ecomoe.policy import (MixturePolicy, ObsLayout, gate_forward, log_gate, mixture_logprob,
                           routing_diversity_loss, sample_actions)

from gradcheck import max_rel_error
from test_genome import sphere_run
from test_learn import gae_brute
from test_morphogen import star


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s (budget {self.seconds}s)"


def randomized(pol, rng, scale=0.4):
    for t in pol.parameters():
        t.data = rng.normal(scale=scale, size=t.shape)
    return pol


def observations(layout, n, rng):
    s = rng.normal(size=(n, layout.dim))
    active = rng.integers(1, layout.j_max + 1, size=n)
    s[:, layout.mask_slice] = (np.arange(layout.j_max)[None, :] < active[:, None]).astype(float)
    return s


# ------------------------------------------------------------------ 1

def test_criterion_01_formula_oracles():
    with Budget(10):
        n, _ = effective_limb_count(star([0.7, 0.3], angles=[0.0, math.pi]))
        assert abs(n - 1.7241) <= 1e-4
        n, _ = effective_limb_count(star([1.0] * 4))
        assert abs(n - 4.0) <= 1e-4
        assert augmented_fitness(10.0, 0.5, 2.0) == 2.5

        rng = np.random.default_rng(1)
        one = ObsLayout(j_max=1, b_max=1)
        pol = randomized(MixturePolicy.create(4, 3, 8, one, seed=0), rng)
        s = observations(one, 1, rng)
        z = rng.normal(size=(1, 3))
        grid = np.linspace(-15, 15, 30001)
        lp = mixture_logprob(pol, np.repeat(s, grid.size, 0), np.repeat(z, grid.size, 0),
                             grid[:, None]).data
        assert abs(np.trapezoid(np.exp(lp), grid) - 1.0) <= 1e-3

        for T, lam in [(1, 0.95), (7, 0.95), (40, 0.5), (25, 1.0)]:
            r, v = rng.normal(size=T), rng.normal(size=T)
            assert np.max(np.abs(gae(r, v, 0.9, lam) - gae_brute(r, v, 0.9, lam))) <= 1e-10


# ------------------------------------------------------------------ 2

def test_criterion_02_gradients():
    worst = 0.0
    with Budget(60):
        for cfg_i in range(20):
            rng = np.random.default_rng(500 + cfg_i)
            lay = ObsLayout(j_max=int(rng.integers(1, 4)), b_max=int(rng.integers(1, 4)))
            K, D, H = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(3, 7))
            pol = randomized(MixturePolicy.create(K, D, H, lay, seed=cfg_i), rng)
            n = 8
            s, z = observations(lay, n, rng), rng.normal(size=(n, D))
            a = rng.normal(scale=0.5, size=(n, lay.j_max))
            zs = rng.normal(size=(6, D))

            gate_loss = lambda: ag.mean(log_gate(pol.gate, z) * rng_w) + routing_diversity_loss(pol.gate, zs)
            rng_w = rng.normal(size=(n, K))
            worst = max(worst, max_rel_error(gate_loss, pol.gate.tensors()))

            heads_w = rng.normal(size=(2, n, K, lay.j_max))

            def expert_loss():
                m, ls = pol.expert_heads(s)
                return ag.mean(m * heads_w[0]) + ag.mean(ls * heads_w[1])
            eparams = [t for e in pol.experts for t in e.tensors()]
            worst = max(worst, max_rel_error(expert_loss, eparams, n_probe=12, rng=rng))

            critic = CriticParams.create(lay.dim, D, H, seed=cfg_i)
            for t in critic.tensors():
                t.data = rng.normal(scale=0.4, size=t.shape)
            cb = Batch(s, z, None, None, None, rng.normal(size=n))
            worst = max(worst, max_rel_error(lambda: critic_loss(critic, cb), critic.tensors(),
                                             n_probe=12, rng=rng))

            lp = mixture_logprob(pol, s, z, a).data
            batch = Batch(s, z, a, lp + rng.normal(scale=0.05, size=n), rng.normal(size=n), None)
            cfg = PPOConfig(entropy_weight=0.05, lambda_div=0.5)
            worst = max(worst, max_rel_error(lambda: actor_loss(pol, batch, cfg, div_zs=zs)[0],
                                             pol.parameters(), n_probe=12, rng=rng))
    print(f"max relative error {worst:.2e}")
    assert worst <= 1e-4


# ------------------------------------------------------------------ 3

def test_criterion_03_cma_es_sphere():
    with Budget(30):
        bests = [sphere_run(seed)[0] for seed in range(5)]
        print("best per seed", [f"{b:.2e}" for b in bests])
        assert sum(b >= -1e-8 for b in bests) >= 4

        rng = np.random.default_rng(9)
        dist = init_distribution(8, base_sigma=0.7)
        Z = rng.normal(size=(16, 8))
        f = -(Z ** 2).sum(axis=1)
        a = cma_update(dist, [ScoredGenotype(z, s) for z, s in zip(Z, f)])
        b = cma_update(dist, [ScoredGenotype(z, 2 * s + 7) for z, s in zip(Z, f)])
        assert a.to_dict() == b.to_dict()


# ------------------------------------------------------------------ 4

def toy_ppo(seed, updates=200):
    """One joint, reward 1 + a: the mean action must climb to the clip at +1."""
    lay = ObsLayout(j_max=1, b_max=1)
    pol = MixturePolicy.create(1, 2, 16, lay, seed=seed)
    cr = CriticParams.create(lay.dim, 2, 16, seed + 100)
    cfg = PPOConfig(actor_lr=3e-3, critic_lr=3e-3, entropy_weight=0.0, lambda_div=0.0)
    opt = Optimizers.create(pol, cr, cfg)
    r = np.random.default_rng(seed)
    s = np.zeros((128, lay.dim))
    s[:, lay.mask_slice] = 1.0
    z = np.zeros((128, 2))
    hist = []
    for _ in range(updates):
        a, lp, _ = sample_actions(pol, s, z, r.random(128), r.standard_normal((128, 1)))
        rew = 1.0 + a[:, 0]
        hist.append(rew.mean())
        ppo_update(pol, cr, Batch(s, z, a, lp, rew - cr.value(s, z), rew), cfg, opt)
    return float(np.mean(hist[:10])), float(np.mean(hist[-10:]))


def test_criterion_04_ppo_learns():
    with Budget(120):
        runs = [toy_ppo(seed) for seed in range(5)]
    print("first/last mean reward", [f"{a:.3f}->{b:.3f}" for a, b in runs])
    assert sum(b > 1.5 * a for a, b in runs) >= 4


# ------------------------------------------------------------------ 5

SMOKE5 = """
[experiment]
task = Flat Ground
method = ecomoe
experts = 4
latent_dim = 16
pop_size = 16
generations = 8
seeds = 0
"""


def test_criterion_05_two_timescale_smoke(tmp_path):
    cfg = parse_config(SMOKE5)
    with Budget(600):
        a = run_experiment(cfg, tmp_path / "a", report=False)
        b = run_experiment(cfg, tmp_path / "b", report=False)
        c = run_experiment(cfg, tmp_path / "c", stop_after=3, report=False)
        assert len(load_records(c / "seed_0")) == 3
        run_experiment(cfg, c, report=False)
    ra, rb, rc = (load_records(x / "seed_0") for x in (a, b, c))
    assert len(ra) == 8
    assert [strip_volatile(r) for r in ra] == [strip_volatile(r) for r in rb]
    assert [strip_volatile(r) for r in ra] == [strip_volatile(r) for r in rc]
    curve = cumulative_max_mean_fitness(ra)
    assert np.all(np.isfinite(curve)) and np.all(np.diff(curve) >= 0)
    for g, r in enumerate(ra):
        assert [e for e in r["events"] if e.startswith("ppo_epoch")] == \
            [f"ppo_epoch:{k}" for k in range(1, 6)]
        assert r["ppo_epochs"] == 5 * (g + 1)


# ------------------------------------------------------------------ 6

def ablation(lam, seed, steps=500):
    """Four frozen experts with distinct action means; the surrogate rewards
    picking expert 0, which on its own pulls every design onto that expert."""
    lay = ObsLayout(j_max=2, b_max=2)
    pol = MixturePolicy.create(4, 16, 16, lay, seed=seed)
    for k, e in enumerate(pol.experts):
        e.layers[-1][1].data[:2] = 0.6 * np.array([np.cos(k * np.pi / 2), np.sin(k * np.pi / 2)])
        e.layers[-1][1].data[2:] = -2.5
        e.set_frozen(True)
    rng = np.random.default_rng(100 + seed)
    Z = rng.normal(size=(32, 16)) * 2.0
    cfg = PPOConfig(actor_lr=1e-2, entropy_weight=0.0, lambda_div=lam)
    opt = Optimizers.create(pol, CriticParams.create(lay.dim, 16, 8, 0), cfg)
    s = np.zeros((128, lay.dim))
    s[:, lay.mask_slice] = 1.0
    z = Z[np.arange(128) % 32]
    for _ in range(steps):
        a, lp, k = sample_actions(pol, s, z, rng.random(128), rng.standard_normal((128, 2)))
        adv = np.where(k == 0, 1.0, -1.0)
        ppo_update(pol, None, Batch(s, z, a, lp, adv, adv), cfg, opt, div_zs=Z)
    return mean_pairwise_gate_distance(gate_forward(pol.gate, Z).data)


def test_criterion_06_routing_diversity_ablation():
    with Budget(60):
        for seed in range(3):
            d0, d1 = ablation(0.0, seed), ablation(0.01, seed)
            print(f"seed {seed}: lambda_div=0 -> {d0:.4f}, lambda_div=0.01 -> {d1:.4f}")
            assert d1 > d0


# ------------------------------------------------------------------ 7

COSTEER = """
[experiment]
task = flat
method = evo_by_demo
pop_size = 16
generations = 4
seeds = 0
[demo]
name = radial_quadruped
variant = CoSteering
restarts = 8
budget = 3
check_gate = false
sweep_w_stand = 0.005
sweep_w_height = 0.005
sweep_w_act = 0.0001
sweep_actor_lr = 6e-5
sweep_critic_lr = 6e-5
sweep_gae_lambda = 0.95
"""


def test_criterion_07_frozen_expert_contract(tmp_path):
    with Budget(300):
        out = run_experiment(parse_config(COSTEER), tmp_path / "cs", report=False)
    mode = json.loads((out / "demo_mode.json").read_text())
    meta = json.loads((out / "seed_0" / "meta.json").read_text())
    recs = load_records(out / "seed_0")
    assert len(recs) == 4
    assert {r["frozen_digest"] for r in recs} == {meta["frozen_digest"]}
    assert np.array_equal(np.array(recs[0]["mean"]), np.array(mode["prior"]["mean"]))
    n = 0
    for r in recs:
        for F, c, sc in zip(r["fitness"], r["c_hat"], r["scores"]):
            if F is None:
                assert sc is None
                continue
            assert abs(sc - F * c ** 2) <= 1e-12
            n += 1
    assert n > 0


# ------------------------------------------------------------------ 8

def test_criterion_08_metric_ordering():
    with Budget(1):
        sym = morph_metrics(load_demo("radial_quadruped").morphology)
        lop = morph_metrics(star([2.5, 0.2, 0.2, 0.2]))
    assert sym.mass_bias_magnitude <= 0.05 and abs(sym.n_eff - 4.0) <= 1e-3
    assert lop.mass_bias_magnitude > sym.mass_bias_magnitude and lop.n_eff < 3


# ------------------------------------------------------------------ 9

UPRIGHT = """
[experiment]
task = upright
method = {method}
experts = 4
pop_size = 16
generations = 20
seeds = 0, 1, 2
"""


@pytest.mark.slow
def test_criterion_09_comparison_harness(tmp_path):
    with Budget(45 * 60):
        base = run_experiment(parse_config(UPRIGHT.format(method="baseline")), tmp_path / "baseline")
        moe = run_experiment(parse_config(UPRIGHT.format(method="ecomoe")), tmp_path / "ecomoe")
        res = compare(base, moe, tmp_path / "compare")
    cmp_dir = tmp_path / "compare"
    for f in ("fitness_ci.svg", "pca.svg", "stats.csv", "compare.json"):
        assert (cmp_dir / f).stat().st_size > 0
    rows = (cmp_dir / "stats.csv").read_text().splitlines()
    assert len(rows) == 21
    assert res["paired_seeds"] == [0, 1, 2]
    assert res["experts_a"] == 1 and res["experts_b"] == 4
    assert res["critic_params"] is not None
    assert res["policy_params_b"] <= res["policy_params_a"]
    # direction is reported only
    print(f"final cummax mean fitness: baseline {res['final_a']:.4f}, ecomoe {res['final_b']:.4f}, "
          f"baseline wins {res['a_wins']}/3 seeds")


# ----------------------------------------------------------------- 10

def test_criterion_10_encode_self_inversion():
    rng = np.random.default_rng(2024)
    dists = []
    with Budget(300):
        for i in range(20):
            target = None
            while target is None:
                target = decode(rng.normal(size=16))
            prior = encode_by_search(target, restarts=8, seed=i)
            dists.append(morphology_distance(decode(prior.mean), target))
    print(f"worst reconstruction distance {max(dists):.2e}")
    assert sum(d <= 1e-3 for d in dists) >= 18
