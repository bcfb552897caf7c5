"""Routing collapse with and without the diversity term.

Four frozen experts with distinct action means; the surrogate advantage is
+1 whenever expert 0 acted. Left alone the gate drifts toward expert 0 for
every design. The diversity term keeps gate outputs apart for distant z.
"""
import numpy as np

from ecomoe.harness.analytics import expert_usage_stats, mean_pairwise_gate_distance
from ecomoe.learn import Batch, CriticParams, Optimizers, PPOConfig, ppo_update
from ecomoe.policy import MixturePolicy, ObsLayout, gate_forward, sample_actions


def train(lam, seed, steps=500, every=100):
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
    trace = []
    for t in range(steps + 1):
        if t % every == 0:
            W = gate_forward(pol.gate, Z).data
            trace.append((t, mean_pairwise_gate_distance(W), expert_usage_stats([W])["index"][0]))
        if t == steps:
            break
        a, lp, k = sample_actions(pol, s, z, rng.random(128), rng.standard_normal((128, 2)))
        adv = np.where(k == 0, 1.0, -1.0)
        ppo_update(pol, None, Batch(s, z, a, lp, adv, adv), cfg, opt, div_zs=Z)
    return trace


for lam in (0.0, 0.01, 0.1):
    print(f"lambda_div = {lam}")
    for t, d, usage in train(lam, seed=0):
        print(f"  step {t:3d}  pairwise distance {d:.4f}  usage {np.round(usage, 3)}")
