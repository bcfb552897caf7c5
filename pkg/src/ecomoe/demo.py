"""Evolution guided by a hand-designed demo body.

A demo contributes in two ways: a single expert pretrained on the demo body
(later frozen into slot 0 of the mixture), and a latent prior found by
encoding the demo body back into genotype space. ``PretrainOnly`` uses the
first, ``PredesignOnly`` the second, ``CoSteering`` both.
"""
from __future__ import annotations

import configparser
import copy
import csv
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .genome import ConfigError, DesignDistribution, init_distribution
from .learn import (Batch, CriticParams, Optimizers, PPOConfig, collect_batch, ppo_epoch,
                    summarize_reports)
from .morphogen import LatentPrior, Morphology, decode, encode_by_search, load_morphology
from .physics import RewardWeights, TaskSpec, rollout_batch
from .policy import ExpertParams, MixturePolicy, ObsLayout, freeze_expert

log = logging.getLogger(__name__)

VARIANTS = ("PretrainOnly", "PredesignOnly", "CoSteering")
REWARD_AXES = ("w_stand", "w_height", "w_act")
OPTIM_AXES = ("actor_lr", "critic_lr", "gae_lambda")
DEFAULT_SWEEP = {
    "w_stand": [0.005, 0.01, 0.02],
    "w_height": [0.005, 0.01, 0.02],
    "w_act": [1e-4, 5e-4],
    "actor_lr": [1e-3, 3e-4, 1e-4],
    "critic_lr": [1e-3, 3e-4, 1e-4],
    "gae_lambda": [0.8, 0.9, 0.95, None],
}


class PretrainError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report or []


@dataclass
class DemoSpec:
    name: str
    morphology: Morphology
    reward_weights: RewardWeights = field(default_factory=RewardWeights)
    pretrain_config: PPOConfig = field(default_factory=PPOConfig.pretrain)
    budget: int = 300
    clones: int = 8
    horizon: int = 200
    sweep: dict = field(default_factory=dict)
    reference: Morphology | None = None


def _parse_value(text: str):
    t = text.strip()
    if t.lower() in ("none", "off", "not used", ""):
        return None
    return float(t)


def _parse_list(text: str) -> list:
    return [_parse_value(v) for v in text.split(",")]


def list_demos() -> list[str]:
    root = resources.files("ecomoe") / "data" / "demos"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _demo_paths(name_or_path) -> tuple[Path, Path | None]:
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        ini = p.with_suffix(".ini")
        return p, ini if ini.exists() else None
    root = resources.files("ecomoe") / "data" / "demos"
    js = root / f"{name_or_path}.json"
    if not js.is_file():
        raise ConfigError(f"unknown demo {name_or_path!r}; shipped demos: {', '.join(list_demos())}")
    ini = root / f"{name_or_path}.ini"
    return Path(str(js)), Path(str(ini)) if ini.is_file() else None


def load_demo(name_or_path) -> DemoSpec:
    """Load a demo body and its sidecar settings (same stem, ``.ini``)."""
    js, ini = _demo_paths(name_or_path)
    morph = load_morphology(js)
    spec = DemoSpec(js.stem, morph)
    if ini is None:
        return spec
    cp = configparser.ConfigParser()
    cp.read(ini)
    if cp.has_section("demo"):
        spec.name = cp.get("demo", "name", fallback=spec.name)
    if cp.has_section("reward"):
        spec.reward_weights = RewardWeights(**{k: float(v) for k, v in cp.items("reward")})
    if cp.has_section("pretrain"):
        kw = dict(cp.items("pretrain"))
        spec.budget = int(kw.pop("budget", spec.budget))
        spec.clones = int(kw.pop("clones", spec.clones))
        spec.horizon = int(kw.pop("horizon", spec.horizon))
        ppo = {k: _parse_value(v) for k, v in kw.items()}
        for k in ("epochs_per_gen", "batch_size", "steps_per_epoch"):
            if ppo.get(k) is not None:
                ppo[k] = int(ppo[k])
        spec.pretrain_config = PPOConfig.pretrain(**ppo)
    if cp.has_section("sweep"):
        for k, v in cp.items("sweep"):
            if k not in DEFAULT_SWEEP and k != "w_move":
                raise ConfigError(f"unknown sweep axis {k!r}")
            spec.sweep[k] = _parse_list(v)
    return spec


def sweep_cells(sweep: dict | None = None) -> list[dict]:
    """Cartesian grid of reward cells x optimiser cells (``w_move`` stays 1.0)."""
    axes = dict(DEFAULT_SWEEP)
    axes.update(sweep or {})
    if "w_move" in axes and any(v != 1.0 for v in axes["w_move"]):
        raise ConfigError("w_move is fixed at 1.0")
    names = list(REWARD_AXES + OPTIM_AXES)
    return [dict(zip(names, combo), w_move=1.0)
            for combo in itertools.product(*(axes[n] for n in names))]


# ------------------------------------------------------------- pretraining

def train_expert(morph: Morphology, weights: RewardWeights, cfg: PPOConfig, budget: int,
                 seed: int = 0, clones: int = 8, horizon: int = 200, latent_dim: int = 16,
                 hidden: int = 64, layout: ObsLayout | None = None):
    """Single-expert PPO on one body; returns (policy, per-epoch mean returns, faults)."""
    layout = layout or ObsLayout()
    policy = MixturePolicy.create(1, latent_dim, hidden, layout, seed=seed)
    critic = CriticParams.create(layout.dim, latent_dim, 64, seed + 1)
    opt = Optimizers.create(policy, critic, cfg)
    task = TaskSpec.make("flat", horizon=horizon)
    z = np.zeros((clones, latent_dim))
    history, faults = [], {}
    for epoch in range(budget):
        ss = np.random.SeedSequence([seed, epoch, 7])
        s_roll, s_batch = ss.spawn(2)
        trajs = rollout_batch([morph] * clones, policy, z, task, horizon, s_roll.spawn(clones),
                              reward="pretrain", weights=weights)
        faults["rollout"] = faults.get("rollout", 0) + sum(not t.valid for t in trajs)
        history.append(float(np.mean([t.dense_return for t in trajs])))
        data = collect_batch(trajs, z, critic, cfg)
        if len(data):
            ppo_epoch(policy, critic, data, cfg, opt, np.random.default_rng(s_batch), None, faults)
    return policy, history, faults


def evaluate_expert(morph: Morphology, policy: MixturePolicy | None, weights: RewardWeights,
                    horizon: int, seed: int = 0, episodes: int = 4, latent_dim: int = 16):
    """Mean pretraining return and mean flat-ground fitness over ``episodes`` rollouts."""
    task = TaskSpec.make("flat", horizon=horizon)
    z = np.zeros((episodes, latent_dim)) if policy is not None else None
    seeds = np.random.SeedSequence([seed, 99]).spawn(episodes)
    trajs = rollout_batch([morph] * episodes, policy, z, task, horizon, seeds,
                          reward="pretrain", weights=weights)
    ok = all(t.valid for t in trajs)
    ret = float(np.mean([t.dense_return for t in trajs]))
    fit = float(np.mean([t.fitness if t.fitness is not None else -np.inf for t in trajs]))
    return ret, fit, ok


def pretrain_expert(demo: DemoSpec, sweep: dict | None = None, budget: int | None = None,
                    seed: int = 0, csv_path=None, latent_dim: int = 16, hidden: int = 64):
    """Grid-search the pretraining reward and optimiser settings on the demo body.

    Every cell trains a fresh single expert; the stable cell with the highest
    mean episodic return wins. Returns (expert parameters, report rows).
    """
    budget = demo.budget if budget is None else budget
    grid = sweep_cells({**demo.sweep, **(sweep or {})})
    rows, experts = [], []
    for i, cell in enumerate(grid):
        weights = replace(demo.reward_weights, w_move=1.0, w_stand=cell["w_stand"],
                          w_height=cell["w_height"], w_act=cell["w_act"])
        cfg = replace(demo.pretrain_config, actor_lr=cell["actor_lr"],
                      critic_lr=cell["critic_lr"], gae_lambda=cell["gae_lambda"])
        policy, hist, faults = train_expert(demo.morphology, weights, cfg, budget, seed,
                                            demo.clones, demo.horizon, latent_dim, hidden)
        ret, fit, ok = evaluate_expert(demo.morphology, policy, weights, demo.horizon, seed,
                                       latent_dim=latent_dim)
        stable = bool(ok and math.isfinite(ret) and faults.get("rollout", 0) == 0
                      and faults.get("ppo", 0) == 0)
        rows.append(dict(cell, cell=i, mean_return=ret, fitness=fit, stable=stable,
                         first_return=hist[0] if hist else float("nan"),
                         last_return=hist[-1] if hist else float("nan"), selected=False))
        experts.append(policy.experts[0])
    stable = [i for i, r in enumerate(rows) if r["stable"]]
    if not stable:
        if csv_path:
            write_sweep_csv(rows, csv_path)
        raise PretrainError("every sweep cell diverged", rows)
    best = max(stable, key=lambda i: (rows[i]["mean_return"], -i))
    rows[best]["selected"] = True
    if csv_path:
        write_sweep_csv(rows, csv_path)
    return copy.deepcopy(experts[best]), rows


SWEEP_COLUMNS = ["cell", "w_move", "w_stand", "w_height", "w_act", "actor_lr", "critic_lr",
                 "gae_lambda", "mean_return", "fitness", "first_return", "last_return",
                 "stable", "selected"]


def write_sweep_csv(rows: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("off" if (k == "gae_lambda" and r[k] is None) else r[k])
                        for k in SWEEP_COLUMNS})


def regression_gate(demo: DemoSpec, expert: ExpertParams, seed: int = 0,
                    latent_dim: int = 16, margin: float = 0.01):
    """The expert must at least double the zero-torque fitness on its own body
    (and beat it by ``margin`` metres, since the zero policy scores about 0)."""
    layout = ObsLayout()
    pol = MixturePolicy.create(1, latent_dim, expert.layers[0][0].shape[1], layout, seed=0)
    pol.experts[0] = copy.deepcopy(expert)
    _, f_expert, ok = evaluate_expert(demo.morphology, pol, demo.reward_weights, demo.horizon,
                                      seed, latent_dim=latent_dim)
    _, f_zero, _ = evaluate_expert(demo.morphology, None, demo.reward_weights, demo.horizon,
                                   seed, latent_dim=latent_dim)
    passed = ok and f_expert >= 2.0 * max(f_zero, 0.0) and f_expert >= f_zero + margin
    return bool(passed), f_expert, f_zero


# ----------------------------------------------------------------- modes

@dataclass
class EvoByDemoMode:
    variant: str
    alpha: float = 2.0
    pretrained: ExpertParams | None = None
    prior: LatentPrior | None = None
    augment: bool = True

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown evo-by-demo variant {self.variant!r}")
        need_expert = self.variant in ("PretrainOnly", "CoSteering")
        need_prior = self.variant in ("PredesignOnly", "CoSteering")
        if need_expert != (self.pretrained is not None):
            raise ConfigError(f"{self.variant} {'needs' if need_expert else 'must not have'} a pretrained expert")
        if need_prior != (self.prior is not None):
            raise ConfigError(f"{self.variant} {'needs' if need_prior else 'must not have'} a latent prior")


def build_mode(variant: str, demo: DemoSpec, restarts: int = 128, seed: int = 0,
               budget: int | None = None, sweep: dict | None = None, latent_dim: int = 16,
               hidden: int = 64, check_gate: bool = True, csv_path=None,
               alpha: float = 2.0) -> EvoByDemoMode:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown evo-by-demo variant {variant!r}")
    prior = expert = None
    if variant in ("PredesignOnly", "CoSteering"):
        prior = encode_by_search(demo.morphology, restarts=restarts, seed=seed, dim=latent_dim,
                                 source_demo=demo.name)
        demo.reference = decode(prior.mean)
        if prior.warning:
            log.warning("prior for %s reconstructs at distance %.3g", demo.name,
                        prior.reconstruction_distance)
    if variant in ("PretrainOnly", "CoSteering"):
        expert, _ = pretrain_expert(demo, sweep, budget, seed, csv_path, latent_dim, hidden)
        if check_gate:
            ok, fe, fz = regression_gate(demo, expert, seed, latent_dim)
            if not ok:
                raise PretrainError(f"pretrained expert fails the regression gate "
                                    f"(fitness {fe:.4f} vs zero policy {fz:.4f})")
    mode = EvoByDemoMode(variant, alpha if expert is not None else 1.0, expert, prior)
    mode.validate()
    return mode


@dataclass
class ConfiguredRun:
    policy: MixturePolicy
    dist: DesignDistribution
    augment: bool
    alpha: float
    frozen_digest: str | None


def apply_mode(mode: EvoByDemoMode | None, policy: MixturePolicy, latent_dim: int,
               base_sigma: float = 1.0, full_covariance: bool = False) -> ConfiguredRun:
    """Inject the frozen expert, pick the initial distribution and fitness route."""
    if mode is None:
        return ConfiguredRun(policy, init_distribution(latent_dim, None, base_sigma, full_covariance),
                             False, 1.0, None)
    mode.validate()
    digest = None
    if mode.pretrained is not None:
        policy = freeze_expert(policy, 0, mode.pretrained)
        digest = policy.experts[0].digest()
    dist = init_distribution(latent_dim, mode.prior, base_sigma, full_covariance)
    return ConfiguredRun(policy, dist, bool(mode.augment and mode.pretrained is not None),
                         mode.alpha, digest)
