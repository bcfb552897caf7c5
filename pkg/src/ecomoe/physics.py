"""Planar articulated rigid bodies with penalty ground contact.

Each body is simulated in reduced coordinates
``q = [x, y, theta_0, q_1 .. q_J]``: the torso centre of mass, the torso
angle, and one relative angle per joint. Bones are padded to ``B_MAX`` and
joints to ``J_MAX`` so a whole population advances in one batched solve.

Contact, joint springs and friction are integrated with a linearised
implicit velocity update, which keeps the stiff ground spring stable at the
control time step split into a few substeps.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .morphogen import J_MAX, Morphology, check_morphology

B_MAX = J_MAX + 1
N_DOF = 3 + J_MAX
N_POINTS = B_MAX + 1
GRAVITY = 9.81

CONTACT_K = 1e4
CONTACT_C = 100.0
FRICTION_MU = 0.8
FRICTION_VEPS = 0.05
SPRING_PER_TORQUE = 1.0
DAMP_PER_TORQUE = 0.05
LIMIT_PER_TORQUE = 20.0
MAX_SPEED = 1e3
CHUNK = 8

TASKS = ("flat", "upright", "potholes")


class SimulationFault(RuntimeError):
    pass


# ------------------------------------------------------------------ terrain

@dataclass(frozen=True)
class Terrain:
    kind: str = "flat"
    pothole_width: float = 0.2
    pothole_depth: float = 0.15
    pothole_spacing: float = 1.0

    def __post_init__(self):
        if self.kind not in ("flat", "potholes"):
            raise ValueError(f"unknown terrain kind {self.kind!r}")
        if self.kind == "potholes":
            if min(self.pothole_width, self.pothole_depth, self.pothole_spacing) <= 0:
                raise ValueError("pothole width, depth and spacing must be positive")
            if self.pothole_width >= self.pothole_spacing:
                raise ValueError("potholes must be narrower than their spacing")

    def height(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "flat":
            return np.zeros_like(x)
        s, w, h = self.pothole_spacing, self.pothole_width, self.pothole_depth
        ramp = min(0.05, 0.25 * w)
        off = np.abs(np.mod(x, s) - 0.5 * s)
        inner = 0.5 * w - ramp
        return np.where(off <= inner, -h,
                        np.where(off < 0.5 * w, -h * (0.5 * w - off) / ramp, 0.0))


@dataclass(frozen=True)
class TaskSpec:
    name: str = "flat"
    terrain: Terrain = field(default_factory=Terrain)
    w_up: float = 0.01
    h_up: float = 0.1
    dt: float = 0.01
    substeps: int = 4
    horizon: int = 500

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}")
        if self.dt <= 0 or self.substeps < 1 or self.horizon < 1:
            raise ValueError("dt, substeps and horizon must be positive")

    @classmethod
    def make(cls, name: str, **kw) -> "TaskSpec":
        terrain = kw.pop("terrain", None)
        if terrain is None:
            terrain = Terrain("potholes") if name == "potholes" else Terrain()
        return cls(name=name, terrain=terrain, **kw)


@dataclass(frozen=True)
class RewardWeights:
    w_move: float = 1.0
    w_stand: float = 0.005
    w_height: float = 0.005
    w_act: float = 1e-4
    eta_cos: float = 0.9
    h_min: float = 0.15

    def __post_init__(self):
        if not self.w_move > 0:
            raise ValueError("w_move must be positive")


# --------------------------------------------------------------- body model

@dataclass(frozen=True)
class BodyModel:
    """Padded, breadth-first reindexed arrays describing one morphology."""

    n_bones: int
    order: tuple[int, ...]           # model bone -> original bone index
    parent: np.ndarray               # (B,) model index, -1 for the torso
    mass: np.ndarray
    inertia: np.ndarray
    half: np.ndarray
    rel_angle: np.ndarray            # rest angle relative to parent (torso: absolute)
    offset: np.ndarray               # (B, 2) pivot in the parent's body frame
    anc: np.ndarray                  # (B, B) ancestor-or-self indicator
    tau: np.ndarray                  # (J,) torque limits, 0 on padding
    lo: np.ndarray
    hi: np.ndarray
    joint_order: tuple[int, ...]     # model joint -> original joint index

    @property
    def n_joints(self) -> int:
        return self.n_bones - 1

    @property
    def total_mass(self) -> float:
        return float(self.mass.sum())


def _rest_angles(m: Morphology) -> list[float]:
    angles = [b.angle for b in m.bones]
    parent = {j.child: j.parent for j in m.joints}
    pos = m.positions()
    order = _bfs(m)
    for b in order:
        if angles[b] is not None:
            continue
        if b == m.root_index:
            angles[b] = 0.0
            continue
        p = parent.get(b)
        # a child hangs off the parent's distal end, or the root's centre
        if p == m.root_index:
            base = pos[p]
        else:
            a = angles[p]
            base = pos[p] + 0.5 * m.bones[p].length * np.array([math.cos(a), math.sin(a)])
        d = pos[b] - base
        angles[b] = math.atan2(d[1], d[0]) if np.linalg.norm(d) > 1e-12 else angles[p]
    return angles


def _bfs(m: Morphology) -> list[int]:
    adj = [[] for _ in m.bones]
    for j in m.joints:
        adj[j.parent].append(j.child)
        adj[j.child].append(j.parent)
    order, seen = [m.root_index], {m.root_index}
    i = 0
    while i < len(order):
        for nb in adj[order[i]]:
            if nb not in seen:
                seen.add(nb)
                order.append(nb)
        i += 1
    return order


def compile_body(m: Morphology) -> BodyModel:
    problems = check_morphology(m)
    if problems:
        raise ValueError("invalid morphology: " + "; ".join(problems))
    if m.n_bones > B_MAX:
        raise ValueError(f"{m.n_bones} bones exceed the pad limit {B_MAX}")
    order = _bfs(m)
    new = {b: i for i, b in enumerate(order)}
    angles = _rest_angles(m)
    jmap = {}
    tree_parent = {}
    for k, j in enumerate(m.joints):
        # the tree is undirected for the simulator: orient it away from the root
        a, b = new[j.parent], new[j.child]
        child = max(a, b)
        tree_parent[child] = min(a, b)
        jmap[child] = k
    n = m.n_bones
    parent = np.full(B_MAX, 0, dtype=int)
    parent[0] = -1
    mass = np.zeros(B_MAX)
    inertia = np.zeros(B_MAX)
    half = np.zeros(B_MAX)
    rel = np.zeros(B_MAX)
    offset = np.zeros((B_MAX, 2))
    anc = np.zeros((B_MAX, B_MAX))
    tau = np.zeros(J_MAX)
    lo = np.full(J_MAX, -1.0)
    hi = np.full(J_MAX, 1.0)
    for i, b in enumerate(order):
        bone = m.bones[b]
        mass[i] = bone.mass
        half[i] = 0.5 * bone.length
        inertia[i] = bone.mass * bone.length ** 2 / 12.0
        anc[i, i] = 1.0
        if i == 0:
            rel[i] = angles[b]
            continue
        p = tree_parent[i]
        parent[i] = p
        anc[i] = anc[p]
        anc[i, i] = 1.0
        pa = angles[order[p]]
        rel[i] = angles[b] - pa
        ab = angles[b]
        pivot = np.asarray(bone.rest_position) - half[i] * np.array([math.cos(ab), math.sin(ab)])
        d = pivot - np.asarray(m.bones[order[p]].rest_position)
        c, s = math.cos(pa), math.sin(pa)
        offset[i] = (c * d[0] + s * d[1], -s * d[0] + c * d[1])
        jt = m.joints[jmap[i]]
        tau[i - 1] = jt.torque_limit
        lo[i - 1], hi[i - 1] = jt.angle_limits
    joint_order = tuple(jmap[i] for i in range(1, n))
    return BodyModel(n, tuple(order), parent, mass, inertia, half, rel, offset, anc,
                     tau, lo, hi, joint_order)


@dataclass
class BodyBatch:
    models: list[BodyModel]

    def __post_init__(self):
        ms = self.models
        self.n = len(ms)
        self.parent = np.stack([m.parent for m in ms])
        self.mass = np.stack([m.mass for m in ms])
        self.inertia = np.stack([m.inertia for m in ms])
        self.half = np.stack([m.half for m in ms])
        self.rel = np.stack([m.rel_angle for m in ms])
        self.offset = np.stack([m.offset for m in ms])
        self.anc = np.stack([m.anc for m in ms])
        self.tau = np.stack([m.tau for m in ms])
        self.lo = np.stack([m.lo for m in ms])
        self.hi = np.stack([m.hi for m in ms])
        self.total = self.mass.sum(axis=1)
        nb = np.array([m.n_bones for m in ms])
        self.bone_on = np.arange(B_MAX)[None, :] < nb[:, None]
        self.joint_on = np.arange(J_MAX)[None, :] < (nb - 1)[:, None]
        self.dof_on = np.concatenate([np.ones((self.n, 3), bool), self.joint_on], axis=1)
        # contact points: both torso ends, then the distal end of every other bone
        self.pt_bone = np.concatenate([[0, 0], np.arange(1, B_MAX)])
        self.pt_sign = np.concatenate([[-1.0, 1.0], np.ones(B_MAX - 1)])
        self.pt_on = np.concatenate([np.ones((self.n, 2), bool), self.bone_on[:, 1:]], axis=1)
        self.k_spring = SPRING_PER_TORQUE * self.tau
        self.d_spring = DAMP_PER_TORQUE * self.tau
        self.k_limit = LIMIT_PER_TORQUE * self.tau
        self.rows = np.arange(self.n)

    def kinematics(self, q, qd):
        """Bone angles, CoMs, joint pivots, angular rates and bias accelerations."""
        n = self.n
        phi = np.empty((n, B_MAX))
        om = np.empty((n, B_MAX))
        x = np.empty((n, B_MAX, 2))
        piv = np.empty((n, B_MAX, 2))
        acc = np.zeros((n, B_MAX, 2))
        phi[:, 0] = q[:, 2] + self.rel[:, 0]
        om[:, 0] = qd[:, 2]
        x[:, 0] = q[:, :2]
        piv[:, 0] = q[:, :2]
        r = self.rows
        for b in range(1, B_MAX):
            p = self.parent[:, b]
            pp = phi[r, p]
            c, s = np.cos(pp), np.sin(pp)
            off = self.offset[:, b]
            arm = np.stack([c * off[:, 0] - s * off[:, 1], s * off[:, 0] + c * off[:, 1]], axis=1)
            piv[:, b] = x[r, p] + arm
            phi[:, b] = pp + self.rel[:, b] + q[:, 2 + b]
            om[:, b] = om[r, p] + qd[:, 2 + b]
            e = np.stack([np.cos(phi[:, b]), np.sin(phi[:, b])], axis=1)
            tip = self.half[:, b, None] * e
            x[:, b] = piv[:, b] + tip
            acc[:, b] = (acc[r, p] - (om[r, p] ** 2)[:, None] * arm
                         - (om[:, b] ** 2)[:, None] * tip)
        return phi, om, x, piv, acc

    def point_jacobian(self, P, bone, piv, x):
        """Jacobian (n, k, 2, N_DOF) of points ``P`` (n, k, 2) rigidly on ``bone`` (k,)."""
        n, k = P.shape[:2]
        J = np.zeros((n, k, 2, N_DOF))
        J[:, :, 0, 0] = 1.0
        J[:, :, 1, 1] = 1.0
        d = P[:, :, None, :] - piv[:, None, :, :]                  # (n, k, B, 2)
        a = self.anc[:, bone, :]                                     # (n, k, B)
        J[:, :, 0, 2:] = -d[..., 1] * a
        J[:, :, 1, 2:] = d[..., 0] * a
        return J

    def contact_points(self, phi, x, om, acc):
        b = self.pt_bone
        e = np.stack([np.cos(phi[:, b]), np.sin(phi[:, b])], axis=-1)
        h = (self.half[:, b] * self.pt_sign)[..., None]
        P = x[:, b] + h * e
        Pacc = acc[:, b] - (om[:, b] ** 2)[..., None] * (h * e)
        return P, Pacc

    def energy(self, q, qd):
        phi, om, x, piv, _ = self.kinematics(q, qd)
        Jb = self.point_jacobian(x, np.arange(B_MAX), piv, x)
        v = np.einsum("nbij,nj->nbi", Jb, qd)
        ke = 0.5 * (self.mass * (v ** 2).sum(-1) + self.inertia * om ** 2).sum(axis=1)
        pe = GRAVITY * (self.mass * x[..., 1]).sum(axis=1)
        return ke, pe

    def substep(self, q, qd, torque, terrain: Terrain, h: float):
        """One implicit-contact velocity step; returns (q, qd, contact_mask)."""
        n = self.n
        phi, om, x, piv, acc = self.kinematics(q, qd)
        Jb = self.point_jacobian(x, np.arange(B_MAX), piv, x)
        Ja = self.anc                                                # angular rows, (n, B, B)

        n_b = Jb.shape[1]
        Jf = Jb.reshape(n, 2 * n_b, N_DOF)
        M = _wgram(Jf, np.repeat(self.mass, 2, axis=1))
        M[:, 2:, 2:] += _wgram(Ja, self.inertia)
        idx = np.arange(N_DOF)
        M[:, idx, idx] += np.where(self.dof_on, 0.0, 1.0)

        Q = -GRAVITY * _wsum(Jb[:, :, 1, :], self.mass)
        Q -= _wsum(Jf, (self.mass[..., None] * acc).reshape(n, 2 * n_b))

        K = np.zeros((n, N_DOF, N_DOF))
        D = np.zeros((n, N_DOF, N_DOF))
        qj, qdj = q[:, 3:], qd[:, 3:]
        over = np.where(qj > self.hi, qj - self.hi, np.where(qj < self.lo, qj - self.lo, 0.0))
        lim = over != 0.0
        jt = (torque - self.k_spring * qj - self.d_spring * qdj
              - self.k_limit * over - np.where(lim, self.d_spring * 4.0 * qdj, 0.0))
        Q[:, 3:] += np.where(self.joint_on, jt, 0.0)
        jd = np.arange(3, N_DOF)
        K[:, jd, jd] = self.k_spring + np.where(lim, self.k_limit, 0.0)
        D[:, jd, jd] = self.d_spring * np.where(lim, 5.0, 1.0)

        P, _ = self.contact_points(phi, x, om, acc)
        Jp = self.point_jacobian(P, self.pt_bone, piv, x)
        Jy, Jx = Jp[:, :, 1, :], Jp[:, :, 0, :]
        vx = (Jx @ qd[..., None])[..., 0]
        vy = (Jy @ qd[..., None])[..., 0]
        depth = terrain.height(P[..., 0]) - P[..., 1]
        fn = CONTACT_K * depth - CONTACT_C * vy
        touching = (depth > 0.0) & (fn > 0.0) & self.pt_on
        fn = np.where(touching, fn, 0.0)
        th = np.tanh(vx / FRICTION_VEPS)
        ft = -FRICTION_MU * fn * th
        Q += _wsum(Jx, ft) + _wsum(Jy, fn)
        t = touching.astype(float)
        K += _wgram(Jy, CONTACT_K * t)
        fr = FRICTION_MU * fn * (1.0 - th * th) / FRICTION_VEPS
        D += _wgram(Jy, CONTACT_C * t) + _wgram(Jx, fr)

        A = M + h * D + h * h * K
        rhs = ((M + h * D) @ qd[..., None])[..., 0] + h * Q
        qd_new = np.linalg.solve(A, rhs[..., None])[..., 0]
        qd_new = np.where(self.dof_on, qd_new, 0.0)
        q_new = q + h * qd_new
        contact = np.zeros((n, B_MAX), bool)
        contact[:, 0] = touching[:, 0] | touching[:, 1]
        contact[:, 1:] = touching[:, 2:]
        return q_new, qd_new, contact

    def place_on_ground(self, terrain: Terrain, x0: float = 0.0):
        """Rest-pose coordinates with the lowest contact point on the terrain."""
        q = np.zeros((self.n, N_DOF))
        q[:, 0] = x0
        phi, om, x, piv, acc = self.kinematics(q, np.zeros_like(q))
        P, _ = self.contact_points(phi, x, om, acc)
        gap = np.where(self.pt_on, terrain.height(P[..., 0]) - P[..., 1], -np.inf)
        q[:, 1] = gap.max(axis=1)
        return q

    def bone_states(self, q, qd):
        phi, om, x, piv, _ = self.kinematics(q, qd)
        Jb = self.point_jacobian(x, np.arange(B_MAX), piv, x)
        v = np.einsum("nbij,nj->nbi", Jb, qd)
        return phi, om, x, v

    def com(self, x):
        return (self.mass[..., None] * x).sum(axis=1) / self.total[:, None]


def _wgram(J, w):
    """``sum_k w_k J_k^T J_k`` for J (n, k, d), w (n, k)."""
    return np.swapaxes(J * w[..., None], 1, 2) @ J


def _wsum(J, w):
    """``sum_k w_k J_k`` for J (n, k, d), w (n, k)."""
    return (w[:, None, :] @ J)[:, 0]


# ------------------------------------------------------------------- state

@dataclass(frozen=True)
class SimState:
    positions: np.ndarray            # (n_bones, 2) bone centres of mass
    angles: np.ndarray
    velocities: np.ndarray
    angular_velocities: np.ndarray
    time: float
    contact_flags: np.ndarray
    com: np.ndarray
    q: np.ndarray                    # simulator coordinates (breadth-first joint order)
    qd: np.ndarray
    root: int = 0

    def to_dict(self) -> dict:
        return {"t": self.time, "com": self.com.tolist(), "positions": self.positions.tolist(),
                "angles": self.angles.tolist(), "contacts": self.contact_flags.astype(int).tolist()}


def _make_state(batch: BodyBatch, i: int, model: BodyModel, q, qd, contact, t: float) -> SimState:
    phi, om, x, v = batch.bone_states(q[i:i + 1], qd[i:i + 1])
    nb = model.n_bones
    com = batch.com(x)[0]
    # report bones in the morphology's own numbering
    inv = np.argsort(np.asarray(model.order))
    return SimState(x[0, inv].copy(), phi[0, inv].copy(), v[0, inv].copy(), om[0, inv].copy(),
                    float(t), contact[i, inv].copy(), com, q[i].copy(), qd[i].copy(),
                    int(model.order[0]))


def initial_state(m: Morphology, terrain: Terrain) -> SimState:
    model = compile_body(m)
    batch = BodyBatch([model])
    q = batch.place_on_ground(terrain)
    qd = np.zeros_like(q)
    return _make_state(batch, 0, model, q, qd, np.zeros((1, B_MAX), bool), 0.0)


def step(state: SimState, m: Morphology, torques, terrain: Terrain, dt: float = 0.01,
         substeps: int = 4) -> SimState:
    """Advance one control step under joint ``torques`` (N m, clamped to limits).

    Raises :class:`SimulationFault` if the state leaves the finite range.
    """
    model = compile_body(m)
    batch = BodyBatch([model])
    tq = np.zeros((1, J_MAX))
    t_in = np.asarray(torques, dtype=float)
    if t_in.shape != (model.n_joints,):
        raise ValueError(f"expected {model.n_joints} torques, got shape {t_in.shape}")
    nj = model.n_joints
    tq[0, :nj] = np.clip(t_in[list(model.joint_order)], -model.tau[:nj], model.tau[:nj])
    q, qd = state.q[None].copy(), state.qd[None].copy()
    h = dt / substeps
    contact = np.zeros((1, B_MAX), bool)
    for _ in range(substeps):
        q, qd, contact = batch.substep(q, qd, tq, terrain, h)
    if not (np.all(np.isfinite(q)) and np.all(np.abs(qd) < MAX_SPEED)):
        raise SimulationFault("non-finite or runaway state")
    return _make_state(batch, 0, model, q, qd, contact, state.time + dt)


def applied_torques(m: Morphology, torques) -> np.ndarray:
    tau = np.array([m.joints[k].torque_limit for k in range(m.n_joints)])
    return np.clip(np.asarray(torques, dtype=float), -tau, tau)


# ----------------------------------------------------------------- rewards

def upright_fraction(state: SimState, task: TaskSpec) -> float:
    return float(np.mean(state.positions[:, 1] > task.h_up))


def task_reward(prev: SimState, nxt: SimState, action, prev_action, task: TaskSpec) -> float:
    r = float(nxt.com[0] - prev.com[0])
    if task.name == "upright":
        r += task.w_up * upright_fraction(nxt, task)
    return r


def pretrain_reward(prev: SimState, nxt: SimState, action, prev_action,
                    weights: RewardWeights, dt: float) -> float:
    move = (nxt.com[0] - prev.com[0]) / dt
    stand = 1.0 if math.cos(prev.angles[prev.root]) >= weights.eta_cos else 0.0
    height = 1.0 if prev.positions[prev.root, 1] >= weights.h_min else 0.0
    act = 0.0
    if prev_action is not None:
        diff = np.asarray(action, dtype=float) - np.asarray(prev_action, dtype=float)
        act = -float(diff @ diff)
    return (weights.w_move * move + weights.w_stand * stand
            + weights.w_height * height + weights.w_act * act)


# -------------------------------------------------------------- trajectory

@dataclass
class Trajectory:
    morphology: Morphology
    q: np.ndarray                    # (T+1, N_DOF)
    qd: np.ndarray
    contacts: np.ndarray             # (T+1, B_MAX)
    actions: np.ndarray              # (T, n_joints), in [-1, 1]
    torques: np.ndarray              # (T, n_joints), N m
    rewards: np.ndarray              # (T,)
    com_x: np.ndarray                # (T+1,)
    upright_fraction_series: np.ndarray  # (T,), after each step
    dt: float
    valid: bool = True
    fitness: float | None = None
    obs: np.ndarray | None = None
    logp: np.ndarray | None = None
    experts: np.ndarray | None = None
    policy_actions: np.ndarray | None = None   # (T, J_MAX) padded, simulator joint order

    @property
    def dense_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def states(self) -> list[SimState]:
        model = compile_body(self.morphology)
        batch = BodyBatch([model])
        return [_make_state(batch, 0, model, self.q[t:t + 1], self.qd[t:t + 1],
                            self.contacts[t:t + 1], t * self.dt)
                for t in range(self.q.shape[0])]


def fitness(traj: Trajectory, task: TaskSpec) -> float | None:
    """Sparse episode score; ``None`` for faulted rollouts (ranked last)."""
    if not traj.valid:
        return None
    disp = float(traj.com_x[-1] - traj.com_x[0])
    if task.name == "upright":
        return disp * float(np.mean(traj.upright_fraction_series))
    return disp


def dump_trajectory(traj: Trajectory, path) -> None:
    with Path(path).open("w") as fh:
        for t, s in enumerate(traj.states):
            rec = s.to_dict()
            if t > 0:
                rec["action"] = traj.actions[t - 1].tolist()
                rec["reward"] = float(traj.rewards[t - 1])
            fh.write(json.dumps(rec) + "\n")


# ----------------------------------------------------------------- rollout

ActionFn = Callable[[np.ndarray, int, np.ndarray, np.ndarray], tuple]


def observe(batch: BodyBatch, q, qd, contact) -> np.ndarray:
    """Padded observation: joint angles, joint rates, torso pose and rates,
    contact flags, joint mask."""
    phi0 = q[:, 2] + batch.rel[:, 0]
    root = np.stack([q[:, 1], np.sin(phi0), np.cos(phi0),
                     0.1 * qd[:, 0], 0.1 * qd[:, 1], 0.1 * qd[:, 2]], axis=1)
    vel = np.clip(0.1 * qd[:, 3:], -10.0, 10.0)
    mask = batch.joint_on.astype(float)
    return np.concatenate([q[:, 3:] * mask, vel * mask, root,
                           contact.astype(float), mask], axis=1)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("ECOMOE_THREADS", "1")))
    except ValueError:
        return 1


def _rollout_chunk(models: list[BodyModel], morphs: list[Morphology], action_fn,
                   task: TaskSpec, horizon: int, reward: str,
                   weights: RewardWeights | None):
    batch = BodyBatch(models)
    n = batch.n
    q = batch.place_on_ground(task.terrain)
    qd = np.zeros_like(q)
    contact = np.zeros((n, B_MAX), bool)
    q_hist = np.zeros((horizon + 1, n, N_DOF))
    qd_hist = np.zeros_like(q_hist)
    c_hist = np.zeros((horizon + 1, n, B_MAX), bool)
    act_hist = np.zeros((horizon, n, J_MAX))
    rew = np.zeros((horizon, n))
    upr = np.zeros((horizon, n))
    comx = np.zeros((horizon + 1, n))
    obs_hist = None
    logp = np.zeros((horizon, n))
    expert = np.zeros((horizon, n), dtype=int)
    alive = np.ones(n, bool)
    length = np.full(n, horizon)
    q_hist[0], qd_hist[0] = q, qd
    _, _, x, _ = batch.bone_states(q, qd)
    com = batch.com(x)
    comx[0] = com[:, 0]
    h = task.dt / task.substeps
    prev_a = None
    for t in range(horizon):
        obs = observe(batch, q, qd, contact)
        if obs_hist is None:
            obs_hist = np.zeros((horizon, n, obs.shape[1]))
        obs_hist[t] = obs
        a, lp, k = action_fn(obs, t)
        a = np.clip(a, -1.0, 1.0) * batch.joint_on
        act_hist[t], logp[t], expert[t] = a, lp, k
        tq = a * batch.tau
        q0, qd0 = q, qd
        for _ in range(task.substeps):
            q, qd, contact = batch.substep(q, qd, tq, task.terrain, h)
        bad = ~(np.all(np.isfinite(q), axis=1) & np.all(np.abs(qd) < MAX_SPEED, axis=1)) & alive
        if bad.any():
            length[bad] = t
            alive &= ~bad
            q = np.where(bad[:, None], q0, q)
            qd = np.where(bad[:, None], 0.0, qd)
        phi, _, x, _ = batch.bone_states(q, qd)
        com = batch.com(x)
        comx[t + 1] = com[:, 0]
        frac = np.where(batch.bone_on, x[..., 1] > task.h_up, False).sum(1) / batch.bone_on.sum(1)
        upr[t] = frac
        if reward == "pretrain":
            phi_p, _, x_p, _ = batch.bone_states(q0, qd0)
            move = (com[:, 0] - comx[t]) / task.dt
            stand = (np.cos(phi_p[:, 0]) >= weights.eta_cos).astype(float)
            height = (x_p[:, 0, 1] >= weights.h_min).astype(float)
            act = np.zeros(n) if prev_a is None else -np.sum((a - prev_a) ** 2, axis=1)
            r = (weights.w_move * move + weights.w_stand * stand
                 + weights.w_height * height + weights.w_act * act)
        else:
            r = com[:, 0] - comx[t]
            if task.name == "upright":
                r = r + task.w_up * frac
        rew[t] = np.where(alive, r, 0.0)
        prev_a = a
        q_hist[t + 1], qd_hist[t + 1], c_hist[t + 1] = q, qd, contact
    out = []
    for i, (mo, morph) in enumerate(zip(models, morphs)):
        T = int(length[i])
        nj = mo.n_joints
        # actions back in the morphology's joint numbering
        back = np.argsort(np.asarray(mo.joint_order, dtype=int))
        acts = act_hist[:T, i, :nj][:, back]
        traj = Trajectory(
            morphology=morph, q=q_hist[:T + 1, i].copy(), qd=qd_hist[:T + 1, i].copy(),
            contacts=c_hist[:T + 1, i].copy(), actions=acts,
            torques=acts * mo.tau[:nj][back], rewards=rew[:T, i].copy(),
            com_x=comx[:T + 1, i].copy(), upright_fraction_series=upr[:T, i].copy(),
            dt=task.dt, valid=bool(alive[i]), obs=obs_hist[:T, i].copy(),
            logp=logp[:T, i].copy(), experts=expert[:T, i].copy(),
            policy_actions=act_hist[:T, i].copy())
        traj.fitness = fitness(traj, task)
        out.append(traj)
    return out


def rollout_batch(morphs: Sequence[Morphology], policy, zs, task: TaskSpec,
                  horizon: int | None = None, seeds: Sequence | None = None,
                  reward: str = "task", weights: RewardWeights | None = None,
                  deterministic: bool = False) -> list[Trajectory]:
    """Closed-loop rollouts of many designs, advanced together.

    ``policy`` is a :class:`~ecomoe.policy.MixturePolicy` or ``None`` for the
    zero-torque controller. Exploration noise for design ``i`` is drawn from
    ``seeds[i]`` alone and designs are advanced in fixed-size chunks, so the
    thread count never changes a result. Regrouping designs (a different
    population size) can move results at the level of float rounding.
    """
    from .policy import sample_actions

    horizon = task.horizon if horizon is None else horizon
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if reward == "pretrain" and weights is None:
        weights = RewardWeights()
    n = len(morphs)
    seeds = list(range(n)) if seeds is None else list(seeds)
    zs = np.atleast_2d(np.asarray(zs, dtype=float)) if policy is not None else None
    models = [compile_body(m) for m in morphs]
    noise_u = np.zeros((n, horizon))
    noise_n = np.zeros((n, horizon, J_MAX))
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        noise_u[i] = rng.random(horizon)
        noise_n[i] = rng.standard_normal((horizon, J_MAX))
    if deterministic:
        noise_n[:] = 0.0

    def job(lo: int):
        hi = min(lo + CHUNK, n)

        def act(obs, t):
            if policy is None:
                k = obs.shape[0]
                return np.zeros((k, J_MAX)), np.zeros(k), np.zeros(k, dtype=int)
            return sample_actions(policy, obs, zs[lo:hi], noise_u[lo:hi, t], noise_n[lo:hi, t])

        return _rollout_chunk(models[lo:hi], list(morphs[lo:hi]), act, task, horizon, reward, weights)

    starts = list(range(0, n, CHUNK))
    threads = min(_thread_count(), len(starts))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(job, starts))
    else:
        parts = [job(s) for s in starts]
    return [t for p in parts for t in p]


def rollout(m: Morphology, policy, z, task: TaskSpec, horizon: int | None = None,
            seed: int = 0, **kw) -> Trajectory:
    return rollout_batch([m], policy, np.atleast_2d(z) if policy is not None else None,
                         task, horizon, [seed], **kw)[0]
