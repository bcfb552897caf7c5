"""Genotype-to-phenotype map, morphology metrics and latent encoding by search.

Bodies are planar star-shaped skeletons: a fixed torso bone with up to
``L_MAX`` radial limbs of up to ``S_MAX`` chained rod segments each. Every
decoded quantity is read from one latent component squashed by ``tanh`` into
``(0, 1)``; parameter ``p`` reads ``z[p % D]``, so any latent dimension works
and ``z = 0`` lands every parameter on the middle of its range.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .genome import ConfigError, ScoredGenotype, cma_update, init_distribution, sample_population

L_MAX = 6
S_MAX = 3
J_MAX = L_MAX * S_MAX
LEN_RANGE = (0.1, 0.5)
MASS_RANGE = (0.2, 2.0)
TORSO_LENGTH = 0.4
TORSO_MASS = 1.0
JOINT_LIMITS = (-1.2, 1.2)
TORQUE_GAIN = 2.0
GRAVITY = 9.81
SECTOR_FILL = 0.8
EPS = 1e-8
SIGMA_FLOOR = 1e-4
SEARCH_BOX = 4.0

# parameter slots: [limb count | segment counts | angles | lengths | masses]
_N_PARAMS = 1 + L_MAX + L_MAX + 2 * J_MAX
_P_COUNT = 0
_P_SEGS = 1
_P_ANGLE = 1 + L_MAX
_P_LEN = 1 + 2 * L_MAX
_P_MASS = _P_LEN + J_MAX


def squash_constants(dim: int):
    """Per-parameter (latent index, gain) used by the decoder.

    Each pass over the latent vector alternates the sign and lowers the gain
    so parameters that share a component are not copies of each other.
    """
    idx = np.arange(_N_PARAMS) % dim
    wrap = np.arange(_N_PARAMS) // dim
    gain = np.where(wrap % 2 == 0, 1.0, -1.0) * (0.8 ** wrap)
    return idx, gain


@dataclass(frozen=True)
class Bone:
    mass: float
    length: float
    rest_position: tuple[float, float]
    angle: float | None = None  # rest orientation; inferred from geometry when None


@dataclass(frozen=True)
class Joint:
    parent: int
    child: int
    torque_limit: float
    angle_limits: tuple[float, float] = JOINT_LIMITS


@dataclass(frozen=True)
class Morphology:
    bones: tuple[Bone, ...]
    joints: tuple[Joint, ...]
    root_index: int = 0

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def masses(self) -> np.ndarray:
        return np.array([b.mass for b in self.bones])

    def positions(self) -> np.ndarray:
        return np.array([b.rest_position for b in self.bones], dtype=float).reshape(-1, 2)

    def children(self) -> list[list[int]]:
        out = [[] for _ in self.bones]
        for j in self.joints:
            out[j.parent].append(j.child)
        return out

    def to_dict(self) -> dict:
        bones = []
        for b in self.bones:
            d = {"mass": b.mass, "length": b.length,
                 "x": b.rest_position[0], "y": b.rest_position[1]}
            if b.angle is not None:
                d["angle"] = b.angle
            bones.append(d)
        joints = [{"parent": j.parent, "child": j.child, "lo": j.angle_limits[0],
                   "hi": j.angle_limits[1], "torque_limit": j.torque_limit}
                  for j in self.joints]
        return {"bones": bones, "joints": joints, "root": self.root_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Morphology":
        bones = tuple(Bone(float(b["mass"]), float(b["length"]),
                           (float(b["x"]), float(b["y"])),
                           None if b.get("angle") is None else float(b["angle"]))
                      for b in d["bones"])
        joints = tuple(Joint(int(j["parent"]), int(j["child"]), float(j["torque_limit"]),
                             (float(j["lo"]), float(j["hi"])))
                       for j in d["joints"])
        m = cls(bones, joints, int(d.get("root", 0)))
        problems = check_morphology(m)
        if problems:
            raise ValueError("invalid morphology: " + "; ".join(problems))
        return m


def check_morphology(m: Morphology) -> list[str]:
    """Return the list of violated invariants (empty when valid)."""
    problems = []
    n = m.n_bones
    if n == 0:
        return ["no bones"]
    if not 0 <= m.root_index < n:
        problems.append(f"root index {m.root_index} out of range")
    for i, b in enumerate(m.bones):
        if not (b.mass > 0 and math.isfinite(b.mass)):
            problems.append(f"bone {i} mass must be positive")
        if not (b.length > 0 and math.isfinite(b.length)):
            problems.append(f"bone {i} length must be positive")
        if not all(math.isfinite(c) for c in b.rest_position):
            problems.append(f"bone {i} position not finite")
    if len(m.joints) != n - 1:
        problems.append(f"{len(m.joints)} joints cannot make a tree over {n} bones")
    seen_child = set()
    for k, j in enumerate(m.joints):
        if not (0 <= j.parent < n and 0 <= j.child < n) or j.parent == j.child:
            problems.append(f"joint {k} must connect two distinct bones")
            continue
        if j.child in seen_child:
            problems.append(f"bone {j.child} has two parents")
        seen_child.add(j.child)
        if not j.angle_limits[0] < j.angle_limits[1]:
            problems.append(f"joint {k} angle limits not ordered")
        if not j.torque_limit > 0:
            problems.append(f"joint {k} torque limit must be positive")
    if problems:
        return problems
    # connectivity from the root over the undirected joint graph
    adj = [[] for _ in range(n)]
    for j in m.joints:
        adj[j.parent].append(j.child)
        adj[j.child].append(j.parent)
    seen = {m.root_index}
    stack = [m.root_index]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        problems.append("joint graph is not connected")
    return problems


def load_morphology(path) -> Morphology:
    return Morphology.from_dict(json.loads(Path(path).read_text()))


def save_morphology(m: Morphology, path) -> None:
    Path(path).write_text(json.dumps(m.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------- decoding

def sector_start(n_limbs: int) -> float:
    first = -math.pi / 2 + (math.pi / n_limbs if n_limbs % 2 == 0 else 0.0)
    return first - math.pi / n_limbs


def decode_params(z) -> dict | None:
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.size == 0 or not np.all(np.isfinite(z)):
        return None
    idx, gain = squash_constants(z.size)
    u = 0.5 * (1.0 + np.tanh(gain * z[idx]))
    n_limbs = min(1 + int(u[_P_COUNT] * (L_MAX + 1)), L_MAX)
    start = sector_start(n_limbs)
    width = 2.0 * math.pi / n_limbs
    limbs = []
    for l in range(n_limbs):
        n_seg = min(1 + int(u[_P_SEGS + l] * S_MAX), S_MAX)
        centre = start + (l + 0.5) * width
        angle = centre + (u[_P_ANGLE + l] - 0.5) * width * SECTOR_FILL
        s0 = l * S_MAX
        lengths = LEN_RANGE[0] + u[_P_LEN + s0:_P_LEN + s0 + n_seg] * (LEN_RANGE[1] - LEN_RANGE[0])
        masses = MASS_RANGE[0] + u[_P_MASS + s0:_P_MASS + s0 + n_seg] * (MASS_RANGE[1] - MASS_RANGE[0])
        limbs.append((angle, lengths, masses))
    return {"limbs": limbs}


def assemble(limbs) -> Morphology:
    """Build the star body from ``[(angle, lengths, masses), ...]`` limb specs."""
    bones = [Bone(TORSO_MASS, TORSO_LENGTH, (0.0, 0.0), 0.0)]
    joints = []
    for angle, lengths, masses in limbs:
        d = (math.cos(angle), math.sin(angle))
        reach = 0.0
        parent = 0
        n = len(lengths)
        for s in range(n):
            L, m = float(lengths[s]), float(masses[s])
            c = reach + 0.5 * L
            bones.append(Bone(m, L, (c * d[0], c * d[1]), float(angle)))
            child = len(bones) - 1
            sub_mass = float(np.sum(masses[s:]))
            sub_reach = float(np.sum(lengths[s:]))
            joints.append(Joint(parent, child, TORQUE_GAIN * GRAVITY * sub_mass * sub_reach))
            parent = child
            reach += L
    return Morphology(tuple(bones), tuple(joints), 0)


def decode(z) -> Morphology | None:
    """Decode a genotype; ``None`` marks an invalid (non-finite) genotype."""
    p = decode_params(z)
    if p is None:
        return None
    return assemble(p["limbs"])


# ----------------------------------------------------------------- metrics

@dataclass(frozen=True)
class MorphMetrics:
    n_eff: float
    mass_bias: tuple[float, float]
    mass_bias_magnitude: float
    branch_fractions: tuple[float, ...]
    root: int
    degenerate: bool = False


def root_segment(m: Morphology) -> int:
    x = m.positions()
    w = m.masses()
    com = (w[:, None] * x).sum(axis=0) / w.sum()
    return int(np.argmin(np.linalg.norm(x - com, axis=1)))


def _adjacency(m: Morphology):
    adj = [[] for _ in m.bones]
    for j in m.joints:
        adj[j.parent].append(j.child)
        adj[j.child].append(j.parent)
    return adj


def branches(m: Morphology, root: int) -> list[list[int]]:
    """Bones of each subtree hanging off ``root``, each in depth-first order."""
    adj = _adjacency(m)
    out = []
    for nb in sorted(adj[root]):
        seen = {root, nb}
        order = []
        stack = [nb]
        while stack:
            b = stack.pop()
            order.append(b)
            for c in sorted(adj[b], reverse=True):
                if c not in seen:
                    seen.add(c)
                    stack.append(c)
        out.append(order)
    return out


def effective_limb_count(m: Morphology):
    """Inverse participation of branch masses around the CoM-nearest bone.

    Returns ``(n_eff, branch_fractions)``. A single-bone body has no
    branches; it is reported as ``n_eff = 1.0`` (see :func:`morph_metrics`
    for the degenerate flag).
    """
    root = root_segment(m)
    w = m.masses()
    masses = np.array([w[b].sum() for b in branches(m, root)])
    if masses.size == 0:
        return 1.0, ()
    q = masses / (masses.sum() + EPS)
    return float(1.0 / (np.sum(q * q) + EPS)), tuple(float(v) for v in q)


def mass_bias(m: Morphology):
    x = m.positions()
    w = m.masses()
    root = root_segment(m)
    v = (w[:, None] * (x - x[root])).sum(axis=0) / w.sum()
    return (float(v[0]), float(v[1])), float(np.linalg.norm(v))


def morph_metrics(m: Morphology) -> MorphMetrics:
    n_eff, q = effective_limb_count(m)
    v, vn = mass_bias(m)
    return MorphMetrics(n_eff, v, vn, q, root_segment(m), degenerate=len(q) == 0)


# ---------------------------------------------------------------- distance

_SLOT = 6 + 2 * S_MAX
FEATURE_WEIGHTS = np.concatenate([
    [1.0],
    np.tile(np.r_[[1.0, 1.0, 1.0, 1.0], np.full(S_MAX, 4.0), np.full(S_MAX, 1.0), [0.5, 1.0]],
            L_MAX),
    [0.1, 0.5, 2.0],
])


def limb_table(m: Morphology):
    """Limbs of the structural root sorted by wrapped attachment angle."""
    root = m.root_index
    x = m.positions()
    limbs = []
    for chain in branches(m, root):
        dx, dy = x[chain[0]] - x[root]
        limbs.append((math.atan2(dy, dx), chain))
    if not limbs:
        return []
    start = sector_start(len(limbs))
    limbs.sort(key=lambda t: ((t[0] - start) % (2.0 * math.pi), t[1][0]))
    return limbs


def morphology_features(m: Morphology) -> np.ndarray:
    f = np.zeros(FEATURE_WEIGHTS.shape[0])
    limbs = limb_table(m)
    f[0] = len(limbs)
    for l, (theta, chain) in enumerate(limbs[:L_MAX]):
        base = 1 + l * _SLOT
        seg = chain[:S_MAX]
        lens = [m.bones[b].length for b in seg]
        mass = [m.bones[b].mass for b in seg]
        f[base:base + 4] = (1.0, math.sin(theta), math.cos(theta), len(chain))
        f[base + 4:base + 4 + len(seg)] = lens
        f[base + 4 + S_MAX:base + 4 + S_MAX + len(seg)] = mass
        f[base + 4 + 2 * S_MAX] = sum(m.bones[b].mass for b in chain)
        f[base + 5 + 2 * S_MAX] = sum(m.bones[b].length for b in chain)
    tail = 1 + L_MAX * _SLOT
    f[tail] = float(m.masses().sum())
    f[tail + 1] = effective_limb_count(m)[0]
    f[tail + 2] = mass_bias(m)[1]
    return f


def feature_distance(fa: np.ndarray, fb: np.ndarray) -> float:
    d = fa - fb
    return float(math.sqrt(np.sum(FEATURE_WEIGHTS * d * d)))


def morphology_distance(a: Morphology, b: Morphology) -> float:
    """Weighted Euclidean distance between morphology feature vectors."""
    return feature_distance(morphology_features(a), morphology_features(b))


# ---------------------------------------------------------------- encoding

@dataclass
class LatentPrior:
    mean: np.ndarray
    sigma: np.ndarray
    source_demo: str = ""
    reconstruction_distance: float = float("nan")
    warning: bool = False
    restarts: int = 0
    latents: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.sigma = np.maximum(np.asarray(self.sigma, dtype=float), SIGMA_FLOOR)
        if self.mean.shape != self.sigma.shape:
            raise ConfigError("prior mean and sigma dimensions differ")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "sigma": self.sigma.tolist(),
                "source_demo": self.source_demo,
                "reconstruction_distance": self.reconstruction_distance,
                "warning": self.warning, "restarts": self.restarts}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentPrior":
        return cls(np.array(d["mean"], dtype=float), np.array(d["sigma"], dtype=float),
                   d.get("source_demo", ""), float(d.get("reconstruction_distance", "nan")),
                   bool(d.get("warning", False)), int(d.get("restarts", 0)))


def latent_features(Z) -> np.ndarray:
    """Features of ``decode(z)`` for every row of ``Z`` without building bodies.

    Rows with non-finite entries come back as NaN. Agrees with
    ``morphology_features(decode(z))`` up to rounding.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n, dim = Z.shape
    idx, gain = squash_constants(dim)
    U = 0.5 * (1.0 + np.tanh(gain * Z[:, idx]))
    L = np.minimum(1 + (U[:, _P_COUNT] * (L_MAX + 1)).astype(int), L_MAX)
    width = 2.0 * np.pi / L
    first = -np.pi / 2 + np.where(L % 2 == 0, np.pi / L, 0.0)
    start = first - np.pi / L
    limbs = np.arange(L_MAX)
    present = limbs[None, :] < L[:, None]                                  # (n, L)
    nseg = np.minimum(1 + (U[:, _P_SEGS:_P_SEGS + L_MAX] * S_MAX).astype(int), S_MAX)
    nseg = np.where(present, nseg, 0)
    theta = (start[:, None] + (limbs[None, :] + 0.5) * width[:, None]
             + (U[:, _P_ANGLE:_P_ANGLE + L_MAX] - 0.5) * width[:, None] * SECTOR_FILL)
    seg_on = np.arange(S_MAX)[None, None, :] < nseg[:, :, None]           # (n, L, S)
    lens = LEN_RANGE[0] + U[:, _P_LEN:_P_LEN + J_MAX].reshape(n, L_MAX, S_MAX) * (LEN_RANGE[1] - LEN_RANGE[0])
    mass = MASS_RANGE[0] + U[:, _P_MASS:_P_MASS + J_MAX].reshape(n, L_MAX, S_MAX) * (MASS_RANGE[1] - MASS_RANGE[0])
    lens = np.where(seg_on, lens, 0.0)
    mass = np.where(seg_on, mass, 0.0)

    F = np.zeros((n, FEATURE_WEIGHTS.shape[0]))
    F[:, 0] = L
    slot = F[:, 1:1 + L_MAX * _SLOT].reshape(n, L_MAX, _SLOT)
    pf = present.astype(float)
    slot[:, :, 0] = pf
    slot[:, :, 1] = np.sin(theta) * pf
    slot[:, :, 2] = np.cos(theta) * pf
    slot[:, :, 3] = nseg
    slot[:, :, 4:4 + S_MAX] = lens
    slot[:, :, 4 + S_MAX:4 + 2 * S_MAX] = mass
    limb_mass = mass.sum(axis=2)
    slot[:, :, 4 + 2 * S_MAX] = limb_mass
    slot[:, :, 5 + 2 * S_MAX] = lens.sum(axis=2)

    # bone centres along each limb; torso at the origin
    reach = np.cumsum(lens, axis=2) - 0.5 * lens
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)                  # (n, L, 2)
    pos = reach[..., None] * d[:, :, None, :]                              # (n, L, S, 2)
    total = TORSO_MASS + limb_mass.sum(axis=1)
    com = (mass[..., None] * pos).sum(axis=(1, 2)) / total[:, None]
    bone_pos = np.concatenate([np.zeros((n, 1, 2)), pos.reshape(n, J_MAX, 2)], axis=1)
    dist = np.linalg.norm(bone_pos - com[:, None, :], axis=2)
    bone_on = np.concatenate([np.ones((n, 1), bool), seg_on.reshape(n, J_MAX)], axis=1)
    # decode numbers bones limb-major, skipping absent segments; the mask keeps that order
    dist = np.where(bone_on, dist, np.inf)
    root = np.argmin(dist, axis=1)
    rows = np.arange(n)

    # branch masses around the root
    on_torso = root == 0
    r_l = np.maximum(root - 1, 0) // S_MAX
    r_s = np.maximum(root - 1, 0) % S_MAX
    seg_mass = mass[rows, r_l]                                            # (n, S)
    s_idx = np.arange(S_MAX)[None, :]
    beyond = np.where(s_idx > r_s[:, None], seg_mass, 0.0).sum(axis=1)
    from_here = np.where(s_idx >= r_s[:, None], seg_mass, 0.0).sum(axis=1)
    has_child = r_s + 1 < nseg[rows, r_l]
    seg_branches = np.stack([total - from_here, np.where(has_child, beyond, 0.0)], axis=1)
    branch = np.where(on_torso[:, None],
                      limb_mass,
                      np.pad(seg_branches, ((0, 0), (0, L_MAX - 2))))
    q = branch / (branch.sum(axis=1, keepdims=True) + EPS)
    n_eff = 1.0 / (np.sum(q * q, axis=1) + EPS)
    tail = 1 + L_MAX * _SLOT
    F[:, tail] = total
    F[:, tail + 1] = n_eff
    F[:, tail + 2] = np.linalg.norm(com - bone_pos[rows, root], axis=1)
    F[~np.all(np.isfinite(Z), axis=1)] = np.nan
    return F


def _weighted_dist(F: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = F - target
    out = np.sqrt(np.sum(FEATURE_WEIGHTS * d * d, axis=1))
    return np.where(np.isfinite(out), out, np.inf)


def search_latent(target_features: np.ndarray, dim: int, rng: np.random.Generator,
                  max_generations: int = 500, tol: float = 1e-9, sigma0: float = 1.0,
                  attempts: int = 8, accept: float = 1e-6, patience: int = 150,
                  polish: float = 0.2):
    """CMA-ES local search from random starts; returns (z, distance).

    A start that makes no progress for ``patience`` generations while still
    above ``accept`` is abandoned. If the best latent so far is already close
    (``polish`` or better) the next attempt restarts from it with a small step;
    otherwise from a fresh random point with twice the population. The best
    latent seen overall is returned.
    """
    lam0 = 4 + int(3 * math.log(dim))
    best_z, best_d = None, math.inf
    fresh, polished = 0, False
    for _ in range(attempts):
        polished = best_d <= polish and not polished
        if polished:
            dist = init_distribution(dim, base_sigma=0.05)
            dist.mean = best_z.copy()
            lam = lam0
        else:
            dist = init_distribution(dim, base_sigma=sigma0)
            dist.mean = rng.standard_normal(dim)
            lam = lam0 * 2 ** fresh
            fresh += 1
        run_best, last_gain = math.inf, 0
        for g in range(max_generations):
            pop = sample_population(dist, lam, rng.integers(2 ** 63))
            P = np.stack(pop)
            d = _weighted_dist(latent_features(P), target_features)
            # tanh saturates far out; keep the search inside a soft box
            d = d + np.sum(np.maximum(np.abs(P) - SEARCH_BOX, 0.0) ** 2, axis=1)
            i = int(np.argmin(d))
            if d[i] < (1.0 - 1e-3) * run_best:
                last_gain = g
            if d[i] < run_best:
                run_best = float(d[i])
                if run_best < best_d:
                    best_z, best_d = pop[i].copy(), run_best
            if best_d <= tol or (g - last_gain > patience and run_best > accept):
                break
            scored = [ScoredGenotype(z, -float(v) if math.isfinite(v) else None)
                      for z, v in zip(pop, d)]
            dist = cma_update(dist, scored)
            if dist.step * float(np.max(dist.scale)) < 1e-12:
                break
        if best_d <= accept:
            break
    return best_z, best_d


def encode_by_search(target: Morphology, restarts: int = 128, seed: int = 0, dim: int = 16,
                     max_generations: int = 500, tolerance: float = 1e-3,
                     source_demo: str = "") -> LatentPrior:
    """Latent prior for ``target``: mean and sample std of the best latents of
    ``restarts`` independent searches."""
    problems = check_morphology(target)
    if problems:
        raise ValueError("invalid target morphology: " + "; ".join(problems))
    if restarts < 2:
        raise ConfigError("encode_by_search needs at least 2 restarts")
    tf = morphology_features(target)
    ss = np.random.SeedSequence(seed)
    latents = []
    for child in ss.spawn(restarts):
        z, _ = search_latent(tf, dim, np.random.default_rng(child), max_generations)
        latents.append(z)
    latents = np.stack(latents)
    mean = latents.mean(axis=0)
    sd = latents.std(axis=0, ddof=1)
    recon = decode(mean)
    d = math.inf if recon is None else morphology_distance(recon, target)
    return LatentPrior(mean, sd, source_demo, d, warning=not d <= tolerance,
                       restarts=restarts, latents=latents)
