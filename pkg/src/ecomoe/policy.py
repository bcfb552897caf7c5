"""Embodiment-conditioned mixture-of-experts controller.

The gate is a single linear-softmax layer over the genotype ``z``. Each expert
is a two-hidden-layer tanh network over a fixed, padded observation that
emits a per-joint Gaussian (mean and log-std). The policy density is the
genuine mixture ``sum_k w_k(z) N(a; mu_k(s), sigma_k(s)^2)`` evaluated with a
max-shifted log-sum-exp; nothing is averaged at the action level.
"""
from __future__ import annotations

import copy
import hashlib
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LOG_STD_MIN = -5.0
LOG_STD_INIT = -0.5
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ObsLayout:
    """Padded observation: joint angles, joint velocities, root pose/velocity,
    per-bone contact flags, joint mask."""

    j_max: int = 18
    b_max: int = 19

    @property
    def dim(self) -> int:
        return 3 * self.j_max + 6 + self.b_max

    @property
    def mask_slice(self) -> slice:
        start = 2 * self.j_max + 6 + self.b_max
        return slice(start, start + self.j_max)

    def joint_mask(self, obs: np.ndarray) -> np.ndarray:
        return obs[..., self.mask_slice]

    def to_dict(self):
        return {"j_max": self.j_max, "b_max": self.b_max}


@dataclass
class GateParams:
    W: Tensor  # (K, D)
    b: Tensor  # (K,)

    def tensors(self):
        return [self.W, self.b]


@dataclass
class ExpertParams:
    layers: list  # [(W (in, out), b (out,)), ...]
    frozen: bool = False

    def tensors(self):
        return [t for pair in self.layers for t in pair]

    def set_frozen(self, flag: bool):
        self.frozen = flag
        for t in self.tensors():
            t.frozen = flag

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# ----------------------------------------------------------------- MLP helpers

def mlp_init(sizes, rng: np.random.Generator, out_scale: float = 1.0, prefix: str = "mlp"):
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = 1.0 / math.sqrt(fan_in)
        if i == len(sizes) - 2:
            scale *= out_scale
        W = Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)), requires_grad=True,
                   name=f"{prefix}.{i}.W")
        b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.{i}.b")
        layers.append((W, b))
    return layers


def mlp_forward(layers, x):
    h = x
    for i, (W, b) in enumerate(layers):
        h = ag.matmul(h, W) + b
        if i < len(layers) - 1:
            h = ag.tanh(h)
    return h


def mlp_param_count(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


# ------------------------------------------------------------------- policy

class MixturePolicy:
    """K experts plus a linear softmax gate over the genotype."""

    def __init__(self, gate: GateParams, experts: list[ExpertParams], layout: ObsLayout):
        if not experts:
            raise ValueError("a mixture needs at least one expert")
        self.gate = gate
        self.experts = experts
        self.layout = layout

    @classmethod
    def create(cls, n_experts: int, latent_dim: int, hidden: int,
               layout: ObsLayout | None = None, seed: int = 0,
               gate_scale: float = 0.01) -> "MixturePolicy":
        layout = layout or ObsLayout()
        rng = np.random.default_rng(seed)
        gate = GateParams(
            W=Tensor(rng.normal(0.0, gate_scale, size=(n_experts, latent_dim)),
                     requires_grad=True, name="gate.W"),
            b=Tensor(np.zeros(n_experts), requires_grad=True, name="gate.b"),
        )
        experts = []
        for k in range(n_experts):
            layers = mlp_init(expert_sizes(layout, hidden), rng, out_scale=0.01,
                              prefix=f"expert{k}")
            layers[-1][1].data[layout.j_max:] = LOG_STD_INIT
            experts.append(ExpertParams(layers))
        return cls(gate, experts, layout)

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def D(self) -> int:
        return self.gate.W.shape[1]

    @property
    def hidden(self) -> int:
        return self.experts[0].layers[0][0].shape[1]

    def parameters(self) -> list[Tensor]:
        out = self.gate.tensors()
        for e in self.experts:
            out.extend(e.tensors())
        return out

    def trainable(self) -> list[Tensor]:
        return [t for t in self.parameters() if not t.frozen]

    def copy(self) -> "MixturePolicy":
        return copy.deepcopy(self)

    def expert_heads(self, obs):
        """Per-expert means and log-stds, each shaped (N, K, J)."""
        obs = ag.as_tensor(obs)
        J = self.layout.j_max
        means, logstds = [], []
        for e in self.experts:
            out = mlp_forward(e.layers, obs)
            means.append(out[:, :J])
            logstds.append(ag.clip(out[:, J:], LOG_STD_MIN, None))
        return ag.stack(means, axis=1), ag.stack(logstds, axis=1)


def expert_sizes(layout: ObsLayout, hidden: int):
    return [layout.dim, hidden, hidden, 2 * layout.j_max]


def count_parameters(policy: MixturePolicy) -> dict:
    expert = sum(t.data.size for t in policy.experts[0].tensors())
    gate = policy.gate.W.data.size + policy.gate.b.data.size
    return {"total": gate + expert * policy.K, "expert": expert, "gate": gate,
            "experts": policy.K}


def budget_hidden(n_experts: int, latent_dim: int, base_hidden: int,
                  layout: ObsLayout | None = None) -> int:
    """Largest expert width whose K-expert mixture fits the K=1 parameter budget."""
    layout = layout or ObsLayout()
    budget = mlp_param_count(expert_sizes(layout, base_hidden)) + latent_dim + 1
    gate = n_experts * latent_dim + n_experts
    h = base_hidden
    while h > 1 and n_experts * mlp_param_count(expert_sizes(layout, h)) + gate > budget:
        h -= 1
    return h


# -------------------------------------------------------------- operations

def gate_forward(gate: GateParams, z):
    """Gate weights ``softmax(W z + b)``; accepts a single z or a batch (N, D)."""
    z = ag.as_tensor(z)
    single = z.ndim == 1
    zb = z.reshape(1, -1) if single else z
    w = ag.softmax(ag.matmul(zb, ag.transpose(gate.W)) + gate.b, axis=-1)
    return w[0] if single else w


def log_gate(gate: GateParams, z):
    z = ag.as_tensor(z)
    return ag.log_softmax(ag.matmul(z, ag.transpose(gate.W)) + gate.b, axis=-1)


def _component_logpdf(means, logstds, a, mask):
    # (N, K, J) -> (N, K), masked joints contribute nothing
    a = a[:, None, :]
    m = mask[:, None, :]
    inv = ag.exp(logstds * -1.0)
    zsc = (a - means) * inv
    per = (ag.square(zsc) * -0.5 - logstds) - 0.5 * _LOG_2PI
    return ag.sum_(per * m, axis=-1)


def mixture_logprob(policy: MixturePolicy, s, z, a):
    """Exact mixture log-density over the unmasked joints.

    Batched inputs (N, .) give a Tensor of shape (N,); 1-D inputs a scalar Tensor.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 1
    if single:
        s, z, a = np.atleast_2d(s), np.atleast_2d(z), np.atleast_2d(a)
    means, logstds = policy.expert_heads(s)
    comp = _component_logpdf(means, logstds, np.asarray(a, dtype=float),
                             policy.layout.joint_mask(s))
    lp = ag.logsumexp(log_gate(policy.gate, z) + comp, axis=-1)
    return lp[0] if single else lp


def mixture_entropy_proxy(policy: MixturePolicy, s, z):
    """Gate-weighted sum of expert Gaussian entropies (a lower bound on the
    mixture entropy), shape (N,)."""
    s = ag.as_tensor(s)
    mask = policy.layout.joint_mask(s.data)
    _, logstds = policy.expert_heads(s)
    h = ag.sum_((logstds + 0.5 * (_LOG_2PI + 1.0)) * mask[:, None, :], axis=-1)
    w = gate_forward(policy.gate, z)
    return ag.sum_(w * h, axis=-1)


def sample_actions(policy: MixturePolicy, obs: np.ndarray, z: np.ndarray,
                   uniforms: np.ndarray, normals: np.ndarray):
    """Batch sampling from pre-drawn noise.

    ``uniforms`` (N,) selects the expert by inverse CDF, ``normals`` (N, J)
    perturbs its mean. Actions are clamped to [-1, 1] and zeroed on masked
    joints. Returns (actions, log-probabilities, expert indices).
    """
    means, logstds = policy.expert_heads(obs)
    w = gate_forward(policy.gate, z).data
    cdf = np.cumsum(w, axis=-1)
    k = np.minimum((uniforms[:, None] >= cdf).sum(axis=-1), policy.K - 1)
    rows = np.arange(obs.shape[0])
    mu = means.data[rows, k]
    sd = np.exp(logstds.data[rows, k])
    mask = policy.layout.joint_mask(obs)
    a = np.clip(mu + sd * normals, -1.0, 1.0) * mask
    lp = mixture_logprob(policy, obs, z, a).data
    return a, lp, k


def mixture_sample(policy: MixturePolicy, s, z, seed) -> np.ndarray:
    """Draw one action for a single observation; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    u = rng.random(1)
    n = rng.standard_normal((1, policy.layout.j_max))
    a, _, _ = sample_actions(policy, np.atleast_2d(s), np.atleast_2d(z), u, n)
    return a[0]


def pair_indices(n: int):
    return np.triu_indices(n, k=1)


def routing_diversity_loss(gate: GateParams, zs) -> Tensor:
    """Negative mean over unordered pairs of ``|z_i - z_j| * |w(z_i) - w(z_j)|``."""
    zs = np.asarray(ag.as_tensor(zs).data if isinstance(zs, Tensor) else zs, dtype=float)
    if zs.shape[0] < 2:
        warnings.warn("routing diversity needs at least two genotypes; returning 0",
                      RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    i, j = pair_indices(zs.shape[0])
    dz = np.linalg.norm(zs[i] - zs[j], axis=-1)
    w = gate_forward(gate, zs)
    dw = ag.norm(w[i] - w[j], axis=-1)
    return ag.mean(dw * dz) * -1.0


def freeze_expert(policy: MixturePolicy, k: int, params: ExpertParams) -> MixturePolicy:
    """Return a copy of ``policy`` with expert ``k`` replaced by ``params`` and frozen."""
    if not 0 <= k < policy.K:
        raise IndexError(f"expert index {k} out of range for K={policy.K}")
    ref = [t.shape for t in policy.experts[k].tensors()]
    got = [t.shape for t in params.tensors()]
    if ref != got:
        raise ValueError(f"expert shape mismatch: expected {ref}, got {got}")
    out = policy.copy()
    new = copy.deepcopy(params)
    for i, pair in enumerate(new.layers):
        for t, role in zip(pair, "Wb"):
            t.name = f"expert{k}.{i}.{role}"
    new.set_frozen(True)
    out.experts[k] = new
    return out


# ------------------------------------------------------------ serialization

def expert_to_dict(e: ExpertParams) -> dict:
    return {"layers": [{"W": W.data.tolist(), "b": b.data.tolist()} for W, b in e.layers],
            "frozen": bool(e.frozen)}


def expert_from_dict(d: dict, prefix: str = "expert") -> ExpertParams:
    layers = []
    for i, l in enumerate(d["layers"]):
        layers.append((Tensor(np.array(l["W"], dtype=float), requires_grad=True,
                              name=f"{prefix}.{i}.W"),
                       Tensor(np.array(l["b"], dtype=float), requires_grad=True,
                              name=f"{prefix}.{i}.b")))
    e = ExpertParams(layers)
    e.set_frozen(bool(d.get("frozen", False)))
    return e


def policy_to_dict(policy: MixturePolicy) -> dict:
    return {
        "K": policy.K,
        "D": policy.D,
        "layout": policy.layout.to_dict(),
        "gate": {"W": policy.gate.W.data.tolist(), "b": policy.gate.b.data.tolist()},
        "experts": [expert_to_dict(e) for e in policy.experts],
    }


def policy_from_dict(d: dict) -> MixturePolicy:
    layout = ObsLayout(**d["layout"])
    gate = GateParams(Tensor(np.array(d["gate"]["W"], dtype=float), requires_grad=True,
                             name="gate.W"),
                      Tensor(np.array(d["gate"]["b"], dtype=float), requires_grad=True,
                             name="gate.b"))
    experts = [expert_from_dict(e, prefix=f"expert{k}") for k, e in enumerate(d["experts"])]
    if len(experts) != d["K"]:
        raise ValueError("checkpoint K does not match expert list")
    return MixturePolicy(gate, experts, layout)
