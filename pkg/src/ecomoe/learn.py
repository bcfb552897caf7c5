"""PPO for the mixture policy and the two-timescale co-design loop.

One generation samples a population of genotypes, rolls every design out
against a snapshot of the shared controller, runs ``epochs_per_gen`` PPO
epochs on the pooled data, re-reads the gate, scores designs, and only then
applies a single distribution update.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import GradTape, Tensor
from .genome import (ConfigError, DesignDistribution, ScoredGenotype, cma_update,
                     preserve_elites, sample_population)
from .morphogen import decode, morph_metrics
from .physics import TaskSpec, Trajectory, rollout_batch
from .policy import (MixturePolicy, gate_forward, mixture_entropy_proxy, mixture_logprob,
                     mlp_forward, mlp_init, mlp_param_count, routing_diversity_loss)

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class PPOConfig:
    actor_lr: float = 6e-5
    critic_lr: float = 6e-5
    gamma: float = 0.9
    gae_lambda: float | None = None
    clip_eps: float = 0.2
    entropy_weight: float = 0.01
    epochs_per_gen: int = 5
    batch_size: int = 128
    steps_per_epoch: int = 40
    lambda_div: float = 0.01
    normalize_advantages: bool = True
    max_grad_norm: float = 0.5

    def __post_init__(self):
        for name in ("actor_lr", "critic_lr", "clip_eps", "batch_size", "steps_per_epoch"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.gae_lambda is not None and not 0 < self.gae_lambda <= 1:
            raise ConfigError("gae_lambda must lie in (0, 1]")
        if self.epochs_per_gen < 1:
            raise ConfigError("epochs_per_gen must be >= 1")
        if self.lambda_div < 0:
            raise ConfigError("lambda_div must be >= 0")

    @classmethod
    def main(cls, **kw) -> "PPOConfig":
        return cls(**kw)

    @classmethod
    def pretrain(cls, **kw) -> "PPOConfig":
        base = dict(gamma=0.99, entropy_weight=0.01, lambda_div=0.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ critic

@dataclass
class CriticParams:
    """Value network over the concatenated (observation, genotype)."""

    layers: list

    @classmethod
    def create(cls, obs_dim: int, latent_dim: int, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(mlp_init([obs_dim + latent_dim, hidden, hidden, 1], rng, 1.0, "critic"))

    def tensors(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def forward(self, obs, z) -> Tensor:
        x = np.concatenate([np.asarray(obs, float), np.asarray(z, float)], axis=-1)
        return mlp_forward(self.layers, Tensor(x))[:, 0]

    def value(self, obs, z) -> np.ndarray:
        return self.forward(obs, z).data

    def to_dict(self) -> dict:
        return {"layers": [{"W": W.data.tolist(), "b": b.data.tolist()} for W, b in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "CriticParams":
        layers = []
        for i, l in enumerate(d["layers"]):
            layers.append((Tensor(np.array(l["W"], float), True, f"critic.W{i}"),
                           Tensor(np.array(l["b"], float), True, f"critic.b{i}")))
        return cls(layers)


def critic_param_count(obs_dim: int, latent_dim: int, hidden: int = 64) -> int:
    return mlp_param_count([obs_dim + latent_dim, hidden, hidden, 1])


# -------------------------------------------------------------------- adam

class Adam:
    def __init__(self, params: list[Tensor], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.frozen:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d["t"])
        self.m = [np.array(a, float).reshape(p.shape) for a, p in zip(d["m"], self.params)]
        self.v = [np.array(a, float).reshape(p.shape) for a, p in zip(d["v"], self.params)]


def clip_grads(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is None or max_norm <= 0 or total <= max_norm or not math.isfinite(total):
        return grads, total
    s = max_norm / total
    return [g * s for g in grads], total


# ------------------------------------------------------- returns & advantages

def discounted_returns(rewards: np.ndarray, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float,
        last_value: float = 0.0) -> np.ndarray:
    T = len(rewards)
    adv = np.zeros(T)
    nxt = last_value
    acc = 0.0
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * nxt - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        nxt = values[t]
    return adv


def advantages_from_values(rewards, values, cfg: PPOConfig):
    """Per-step (advantage, return target); the episode end is treated as terminal."""
    rewards = np.asarray(rewards, float)
    values = np.asarray(values, float)
    if cfg.gae_lambda is None:
        ret = discounted_returns(rewards, cfg.gamma)
        return ret - values, ret
    adv = gae(rewards, values, cfg.gamma, cfg.gae_lambda)
    return adv, adv + values


def returns_and_advantages(traj: Trajectory, critic: CriticParams | None, cfg: PPOConfig, z=None):
    T = traj.horizon
    if critic is None or T == 0:
        values = np.zeros(T)
    else:
        zz = np.broadcast_to(np.asarray(z, float), (T, np.asarray(z).shape[-1]))
        values = critic.value(traj.obs, zz)
    return advantages_from_values(traj.rewards, values, cfg)


# -------------------------------------------------------------- PPO update

@dataclass
class Batch:
    s: np.ndarray
    z: np.ndarray
    a: np.ndarray
    logp_old: np.ndarray
    adv: np.ndarray
    ret: np.ndarray

    def __len__(self):
        return self.s.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.s[idx], self.z[idx], self.a[idx], self.logp_old[idx],
                     self.adv[idx], self.ret[idx])


def actor_loss(policy: MixturePolicy, batch: Batch, cfg: PPOConfig, div_zs=None,
               normalize: bool | None = None):
    """Clipped surrogate, entropy bonus and routing-diversity term as one scalar.

    Returns (loss, parts) where ``parts`` holds float diagnostics.
    """
    adv = batch.adv
    if (cfg.normalize_advantages if normalize is None else normalize) and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    lp = mixture_logprob(policy, batch.s, batch.z, batch.a)
    ratio = ag.exp(lp - batch.logp_old)
    surr = ag.minimum(ratio * adv, ag.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv)
    surr_m = ag.mean(surr)
    loss = surr_m * -1.0
    ent = None
    if cfg.entropy_weight != 0.0:
        ent = ag.mean(mixture_entropy_proxy(policy, batch.s, batch.z))
        loss = loss - ent * cfg.entropy_weight
    div = None
    if cfg.lambda_div != 0.0 and div_zs is not None and len(div_zs) >= 2:
        div = routing_diversity_loss(policy.gate, div_zs)
        loss = loss + div * cfg.lambda_div
    parts = {"surrogate": float(surr_m.data),
             "entropy": float(ent.data) if ent is not None else 0.0,
             "l_div": float(div.data) if div is not None else 0.0,
             "ratio_mean": float(ratio.data.mean()),
             "ratio_max_dev": float(np.max(np.abs(ratio.data - 1.0))),
             "clip_frac": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_eps))}
    return loss, parts


def critic_loss(critic: CriticParams, batch: Batch) -> Tensor:
    v = critic.forward(batch.s, batch.z)
    return ag.mean(ag.square(v - batch.ret))


@dataclass
class Optimizers:
    actor: Adam
    critic: Adam

    @classmethod
    def create(cls, policy: MixturePolicy, critic: CriticParams, cfg: PPOConfig):
        return cls(Adam(policy.parameters(), cfg.actor_lr), Adam(critic.tensors(), cfg.critic_lr))

    def state_dict(self):
        return {"actor": self.actor.state_dict(), "critic": self.critic.state_dict()}

    def load_state_dict(self, d):
        self.actor.load_state_dict(d["actor"])
        self.critic.load_state_dict(d["critic"])


def ppo_update(policy: MixturePolicy, critic: CriticParams | None, batch: Batch, cfg: PPOConfig,
               opt: Optimizers, div_zs=None, faults: dict | None = None) -> dict:
    """One clipped-surrogate gradient step for the actor and one MSE step for
    the critic. Non-finite losses skip the step and bump ``faults['ppo']``."""
    if len(batch) == 0:
        raise ValueError("empty PPO batch")
    if not np.all(np.isfinite(batch.adv)):
        raise ValueError("non-finite advantages")
    params = policy.parameters()
    with GradTape() as tape:
        loss, parts = actor_loss(policy, batch, cfg, div_zs)
    report = dict(parts, actor_loss=float(loss.data), skipped=False)
    if not math.isfinite(report["actor_loss"]):
        report["skipped"] = True
        if faults is not None:
            faults["ppo"] = faults.get("ppo", 0) + 1
        return report
    grads, gnorm = clip_grads(tape.gradient(loss, params), cfg.max_grad_norm)
    if not math.isfinite(gnorm):
        report["skipped"] = True
        if faults is not None:
            faults["ppo"] = faults.get("ppo", 0) + 1
        return report
    opt.actor.step(grads)
    report["actor_grad_norm"] = gnorm
    if critic is not None:
        cparams = critic.tensors()
        with GradTape() as tape:
            closs = critic_loss(critic, batch)
        report["critic_loss"] = float(closs.data)
        if math.isfinite(report["critic_loss"]):
            cg, _ = clip_grads(tape.gradient(closs, cparams), cfg.max_grad_norm)
            opt.critic.step(cg)
    return report


def ppo_epoch(policy, critic, data: Batch, cfg: PPOConfig, opt: Optimizers,
              rng: np.random.Generator, div_zs=None, faults=None) -> list[dict]:
    """``steps_per_epoch`` minibatch updates over a fresh permutation of ``data``."""
    n = len(data)
    bs = min(cfg.batch_size, n)
    perm = rng.permutation(n)
    out = []
    pos = 0
    for _ in range(cfg.steps_per_epoch):
        if pos + bs > n:
            perm = rng.permutation(n)
            pos = 0
        out.append(ppo_update(policy, critic, data.take(perm[pos:pos + bs]), cfg, opt,
                              div_zs, faults))
        pos += bs
    return out


def summarize_reports(reports: list[dict]) -> dict:
    keys = [k for k in reports[0] if isinstance(reports[0][k], float)] if reports else []
    out = {k: float(np.mean([r[k] for r in reports if k in r])) for k in keys}
    out["updates"] = len(reports)
    out["skipped"] = int(sum(r.get("skipped", False) for r in reports))
    return out


# ---------------------------------------------------- compatibility/fitness

@dataclass(frozen=True)
class CompatibilityScore:
    value: float
    genotype: np.ndarray
    generation: int = 0


def frozen_index(policy: MixturePolicy) -> int | None:
    for k, e in enumerate(policy.experts):
        if e.frozen:
            return k
    return None


def compatibility(policy: MixturePolicy, z, generation: int = 0,
                  index: int | None = None) -> CompatibilityScore:
    """Gate weight the (post-update) policy assigns to its frozen expert."""
    k = frozen_index(policy) if index is None else index
    if k is None or not policy.experts[k].frozen:
        raise ConfigError("compatibility needs a frozen expert in the mixture")
    w = gate_forward(policy.gate, np.asarray(z, float)).data
    return CompatibilityScore(float(w[k]), np.asarray(z, float), generation)


def augmented_fitness(F: float, c_hat: float, alpha: float = 2.0) -> float:
    if not 0.0 <= c_hat <= 1.0:
        warnings.warn(f"compatibility {c_hat} outside [0, 1]; clamped", RuntimeWarning, stacklevel=2)
        c_hat = min(max(c_hat, 0.0), 1.0)
    return F * c_hat ** alpha


# --------------------------------------------------------- co-design loop

@dataclass
class LoopSettings:
    pop_size: int = 64
    elites: int = 4
    horizon: int | None = None
    alpha: float = 2.0
    augment: bool = True


@dataclass
class EngineState:
    dist: DesignDistribution
    policy: MixturePolicy
    critic: CriticParams
    opt: Optimizers
    generation: int = 0
    ppo_epochs: int = 0
    prev_scored: list = field(default_factory=list)
    faults: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        from .policy import policy_to_dict
        return {"dist": self.dist.to_dict(), "policy": policy_to_dict(self.policy),
                "critic": self.critic.to_dict(), "opt": self.opt.state_dict(),
                "generation": self.generation, "ppo_epochs": self.ppo_epochs,
                "prev_scored": [{"z": s.genotype.tolist(), "score": s.score}
                                for s in self.prev_scored],
                "faults": dict(self.faults)}

    @classmethod
    def from_dict(cls, d: dict, cfg: PPOConfig) -> "EngineState":
        from .policy import policy_from_dict
        policy = policy_from_dict(d["policy"])
        critic = CriticParams.from_dict(d["critic"])
        opt = Optimizers.create(policy, critic, cfg)
        opt.load_state_dict(d["opt"])
        prev = [ScoredGenotype(np.array(s["z"], float), s["score"]) for s in d["prev_scored"]]
        return cls(DesignDistribution.from_dict(d["dist"]), policy, critic, opt,
                   int(d["generation"]), int(d["ppo_epochs"]), prev, dict(d.get("faults", {})))


def generation_seeds(seed: int, gen: int):
    """Independent streams for (sampling, rollouts, minibatching) of one generation."""
    ss = np.random.SeedSequence([int(seed), int(gen)])
    a, b, c = ss.spawn(3)
    return a, b, c


def collect_batch(trajs: list[Trajectory], zs: np.ndarray, critic, cfg: PPOConfig) -> Batch:
    parts = []
    for tr, z in zip(trajs, zs):
        if tr.horizon == 0:
            continue
        adv, ret = returns_and_advantages(tr, critic, cfg, z)
        parts.append((tr.obs, np.broadcast_to(z, (tr.horizon, z.shape[0])), tr.policy_actions,
                      tr.logp, adv, ret))
    if not parts:
        return Batch(*(np.zeros((0,)) for _ in range(6)))
    return Batch(*(np.concatenate([p[i] for p in parts]) for i in range(6)))


def run_generation(state: EngineState, cfg: PPOConfig, task: TaskSpec, settings: LoopSettings,
                   seed: int) -> dict:
    """Advance the engine by one generation and return its RunRecord."""
    t0 = time.perf_counter()
    g = state.generation
    events = []
    s_sample, s_roll, s_batch = generation_seeds(seed, g)
    pop = sample_population(state.dist, settings.pop_size, s_sample)
    pop = preserve_elites(state.prev_scored, pop, min(settings.elites, len(state.prev_scored)))
    events.append("sample")
    zs = np.stack(pop)
    morphs = [decode(z) for z in pop]
    events.append("decode")

    ok = [i for i, m in enumerate(morphs) if m is not None]
    roll_seeds = s_roll.spawn(len(pop))
    trajs: list[Trajectory | None] = [None] * len(pop)
    if ok:
        out = rollout_batch([morphs[i] for i in ok], state.policy, zs[ok], task,
                            settings.horizon, [roll_seeds[i] for i in ok])
        for i, tr in zip(ok, out):
            trajs[i] = tr
    events.append("rollout")

    live = [i for i in ok if trajs[i].horizon > 0]
    data = collect_batch([trajs[i] for i in live], zs[live], state.critic, cfg)
    rng = np.random.default_rng(s_batch)
    reports = []
    if len(data) > 0:
        for e in range(cfg.epochs_per_gen):
            reports.extend(ppo_epoch(state.policy, state.critic, data, cfg, state.opt, rng,
                                     div_zs=zs, faults=state.faults))
            state.ppo_epochs += 1
            events.append(f"ppo_epoch:{e + 1}")

    fk = frozen_index(state.policy)
    gate_w = None
    if state.policy.K > 1:
        gate_w = gate_forward(state.policy.gate, zs).data
    c_hat = None
    if fk is not None:
        c_hat = [compatibility(state.policy, z, g, fk).value for z in zs]
        events.append("compat")

    raw = [None if trajs[i] is None else trajs[i].fitness for i in range(len(pop))]
    scores = []
    for i, F in enumerate(raw):
        if F is None or not math.isfinite(F):
            scores.append(None)
        elif c_hat is not None and settings.augment:
            scores.append(augmented_fitness(F, c_hat[i], settings.alpha))
        else:
            scores.append(float(F))
    events.append("score")

    scored = [ScoredGenotype(z, s) for z, s in zip(pop, scores)]
    failed = not any(sc.valid for sc in scored)
    prev_mean = state.dist.mean.copy()
    state.dist = cma_update(state.dist, scored)
    events.append("cma_update")
    state.prev_scored = scored
    state.generation = g + 1

    best = None
    valid_idx = [i for i, s in enumerate(scores) if s is not None]
    if valid_idx:
        b = max(valid_idx, key=lambda i: (scores[i], -i))
        mm = morph_metrics(morphs[b])
        best = {"index": b, "fitness": raw[b], "score": scores[b], "n_eff": mm.n_eff,
                "mass_bias": mm.mass_bias_magnitude, "n_bones": morphs[b].n_bones}
    sig = state.dist.sigma
    return {
        "gen": g,
        "mean": prev_mean.tolist(),
        "next_mean": state.dist.mean.tolist(),
        "sigma_summary": {"min": float(sig.min()), "max": float(sig.max()),
                          "mean": float(sig.mean()), "step": state.dist.step},
        "sigma": sig.tolist(),
        "genotypes": zs.tolist(),
        "fitness": raw,
        "scores": scores,
        "valid": [s is not None for s in scores],
        "c_hat": c_hat,
        "gate_weights_per_design": None if gate_w is None else gate_w.tolist(),
        "loss_report": summarize_reports(reports) if reports else {},
        "ppo_epochs": state.ppo_epochs,
        "events": events,
        "failed": failed,
        "best_metrics": best,
        "faults": dict(state.faults),
        "wallclock": time.perf_counter() - t0,
    }
