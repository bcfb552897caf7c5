"""Seeded, resumable experiment runs.

Layout of a run directory::

    config.ini            echo of the effective configuration
    demo_mode.json        frozen expert / latent prior (evo-by-demo only)
    seed_<n>/records.jsonl  one RunRecord per generation
    seed_<n>/checkpoint.json  engine state after the last completed generation
    seed_<n>/meta.json    parameter counts and method description
    report/               analytics CSV and SVG files
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import numpy as np

from ..demo import EvoByDemoMode, apply_mode, build_mode, load_demo
from ..genome import ConfigError
from ..learn import (CriticParams, EngineState, LoopSettings, Optimizers, critic_param_count,
                     frozen_index, run_generation)
from ..morphogen import LatentPrior, decode
from ..physics import dump_trajectory, rollout
from ..policy import (MixturePolicy, ObsLayout, budget_hidden, count_parameters,
                      expert_from_dict, expert_to_dict)
from .config import ExperimentConfig, dump_config, load_config

log = logging.getLogger(__name__)

VOLATILE = ("wallclock",)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def expert_hidden(cfg: ExperimentConfig, layout: ObsLayout) -> int:
    if cfg.n_experts == 1:
        return cfg.base_hidden
    return budget_hidden(cfg.n_experts, cfg.latent_dim, cfg.base_hidden, layout)


def build_policy(cfg: ExperimentConfig, seed: int, layout: ObsLayout | None = None) -> MixturePolicy:
    layout = layout or ObsLayout()
    return MixturePolicy.create(cfg.n_experts, cfg.latent_dim, expert_hidden(cfg, layout),
                                layout, seed=int(seed))


def describe(cfg: ExperimentConfig) -> dict:
    layout = ObsLayout()
    pol = build_policy(cfg, 0, layout)
    counts = count_parameters(pol)
    return {"method": cfg.method, "experts": cfg.n_experts, "hidden": expert_hidden(cfg, layout),
            "policy_params": counts["total"], "expert_params": counts["expert"],
            "gate_params": counts["gate"],
            "critic_params": critic_param_count(layout.dim, cfg.latent_dim, cfg.critic_hidden),
            "obs_layout": layout.to_dict(), "latent_dim": cfg.latent_dim}


# ------------------------------------------------------------ demo modes

def _mode_to_dict(mode: EvoByDemoMode) -> dict:
    return {"variant": mode.variant, "alpha": mode.alpha, "augment": mode.augment,
            "pretrained": None if mode.pretrained is None else expert_to_dict(mode.pretrained),
            "prior": None if mode.prior is None else mode.prior.to_dict()}


def _mode_from_dict(d: dict) -> EvoByDemoMode:
    pre = None if d["pretrained"] is None else expert_from_dict(d["pretrained"])
    prior = None if d["prior"] is None else LatentPrior.from_dict(d["prior"])
    mode = EvoByDemoMode(d["variant"], float(d["alpha"]), pre, prior, bool(d["augment"]))
    mode.validate()
    return mode


def demo_mode(cfg: ExperimentConfig, out: Path) -> EvoByDemoMode | None:
    """Build (or reload) the evo-by-demo mode shared by every seed of a run."""
    if cfg.method != "evo_by_demo":
        return None
    path = out / "demo_mode.json"
    if path.exists():
        return _mode_from_dict(json.loads(path.read_text()))
    ds = cfg.demo
    spec = load_demo(ds.name)
    layout = ObsLayout()
    mode = build_mode(ds.variant, spec, restarts=ds.restarts, seed=cfg.seeds[0], budget=ds.budget,
                      sweep=ds.sweep or None, latent_dim=cfg.latent_dim,
                      hidden=expert_hidden(cfg, layout), check_gate=ds.check_gate,
                      csv_path=out / "pretrain_sweep.csv", alpha=ds.alpha)
    mode.augment = ds.augment
    _atomic_write(path, json.dumps(_mode_to_dict(mode)))
    return mode


# --------------------------------------------------------------- seeds

def fresh_state(cfg: ExperimentConfig, seed: int, mode: EvoByDemoMode | None):
    layout = ObsLayout()
    policy = build_policy(cfg, seed, layout)
    run = apply_mode(mode, policy, cfg.latent_dim, cfg.base_sigma, cfg.full_covariance)
    critic = CriticParams.create(layout.dim, cfg.latent_dim, cfg.critic_hidden, seed + 10_000)
    opt = Optimizers.create(run.policy, critic, cfg.ppo)
    return EngineState(run.dist, run.policy, critic, opt), run


def settings_for(cfg: ExperimentConfig, mode: EvoByDemoMode | None) -> LoopSettings:
    augment = bool(mode is not None and mode.pretrained is not None and mode.augment)
    alpha = mode.alpha if mode is not None else 1.0
    return LoopSettings(cfg.pop_size, cfg.elites, cfg.horizon, alpha, augment)


def run_seed(cfg: ExperimentConfig, seed: int, out: Path, mode: EvoByDemoMode | None = None,
             stop_after: int | None = None, dump_traj: bool = False) -> Path:
    """Run (or continue) one seed up to ``cfg.generations``.

    ``stop_after`` ends the call early after that many completed generations,
    leaving a resumable checkpoint behind.
    """
    sdir = out / f"seed_{seed}"
    sdir.mkdir(parents=True, exist_ok=True)
    ck = sdir / "checkpoint.json"
    rec_path = sdir / "records.jsonl"
    if ck.exists():
        state = EngineState.from_dict(json.loads(ck.read_text()), cfg.ppo)
        lines = rec_path.read_text().splitlines() if rec_path.exists() else []
        if len(lines) < state.generation:
            raise RuntimeError(f"{rec_path} has fewer records than the checkpoint")
        # drop records written after the last checkpoint
        _atomic_write(rec_path, "".join(l + "\n" for l in lines[:state.generation]))
    else:
        state, _ = fresh_state(cfg, seed, mode)
        rec_path.write_text("")
        meta = describe(cfg)
        meta["seed"] = seed
        if mode is not None and mode.pretrained is not None:
            meta["frozen_digest"] = state.policy.experts[0].digest()
        _atomic_write(sdir / "meta.json", json.dumps(meta, indent=2))
    task = cfg.task_spec()
    settings = settings_for(cfg, mode)
    done_now = 0
    while state.generation < cfg.generations:
        if stop_after is not None and done_now >= stop_after:
            break
        rec = run_generation(state, cfg.ppo, task, settings, seed)
        fk = frozen_index(state.policy)
        rec["frozen_digest"] = None if fk is None else state.policy.experts[fk].digest()
        with rec_path.open("a") as fh:
            fh.write(json.dumps(rec) + "\n")
        _atomic_write(ck, json.dumps(state.to_dict()))
        done_now += 1
    if dump_traj and state.generation >= cfg.generations:
        write_best_trajectory(cfg, state, sdir, seed)
    return sdir


def write_best_trajectory(cfg, state: EngineState, sdir: Path, seed: int) -> Path | None:
    recs = load_records(sdir)
    if not recs:
        return None
    last = recs[-1]
    best = last.get("best_metrics")
    if not best:
        return None
    z = np.array(last["genotypes"][best["index"]])
    traj = rollout(decode(z), state.policy, z, cfg.task_spec(), cfg.horizon, seed=seed,
                   deterministic=True)
    path = sdir / "best_trajectory.jsonl"
    dump_trajectory(traj, path)
    return path


def run_experiment(cfg: ExperimentConfig, out=None, stop_after: int | None = None,
                   dump_traj: bool = False, report: bool = True) -> Path:
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.ini"
    text = dump_config(cfg)
    if cfg_path.exists() and cfg_path.read_text() != text:
        raise ConfigError(f"{out} already holds a run with a different configuration")
    cfg_path.write_text(text)
    mode = demo_mode(cfg, out)
    for seed in cfg.seeds:
        run_seed(cfg, seed, out, mode, stop_after, dump_traj)
    if report and stop_after is None:
        from .report import emit_report
        from .analytics import build_bundle
        emit_report(build_bundle(out), out / "report")
    return out


def resume(out, dump_traj: bool = False, report: bool = True) -> Path:
    out = Path(out)
    cfg = load_config(out / "config.ini")
    return run_experiment(cfg, out, dump_traj=dump_traj, report=report)


# ----------------------------------------------------------- reading runs

def load_records(seed_dir) -> list[dict]:
    p = Path(seed_dir) / "records.jsonl"
    if not p.exists():
        return []
    return [json.loads(l) for l in p.read_text().splitlines() if l.strip()]


def seed_dirs(run_dir) -> list[Path]:
    dirs = [p for p in Path(run_dir).iterdir() if p.is_dir() and p.name.startswith("seed_")]
    return sorted(dirs, key=lambda p: int(p.name.split("_", 1)[1]))


def strip_volatile(rec: dict) -> dict:
    return {k: v for k, v in rec.items() if k not in VOLATILE}
