"""Experiment configuration read from sectioned key/value files."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..genome import ConfigError
from ..learn import PPOConfig
from ..physics import TASKS, TaskSpec, Terrain

METHODS = ("baseline", "ecomoe", "evo_by_demo")
_TASK_ALIASES = {"flat": "flat", "flatground": "flat", "flat_ground": "flat",
                 "upright": "upright", "uprightlocomotion": "upright",
                 "upright_locomotion": "upright", "potholes": "potholes"}


@dataclass(frozen=True)
class DemoSettings:
    name: str = "radial_quadruped"
    variant: str = "CoSteering"
    restarts: int = 128
    budget: int | None = None
    alpha: float = 2.0
    augment: bool = True
    check_gate: bool = True
    sweep: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "flat"
    method: str = "ecomoe"
    experts: int = 4
    generations: int = 50
    pop_size: int = 64
    elites: int = 4
    latent_dim: int = 16
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    base_sigma: float = 1.0
    full_covariance: bool = False
    base_hidden: int = 165
    critic_hidden: int = 64
    output_dir: str = "runs"
    horizon: int = 500
    dt: float = 0.01
    substeps: int = 4
    w_up: float = 0.01
    h_up: float = 0.1
    pothole_width: float = 0.2
    pothole_depth: float = 0.15
    pothole_spacing: float = 1.0
    ppo: PPOConfig = field(default_factory=PPOConfig)
    demo: DemoSettings | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.experts < 1:
            raise ConfigError("experts must be >= 1")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.pop_size < 2:
            raise ConfigError("pop_size must be >= 2")
        if not 0 <= self.elites <= self.pop_size:
            raise ConfigError("elites must lie in [0, pop_size]")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if self.method == "evo_by_demo" and self.demo is None:
            raise ConfigError("method evo_by_demo needs a [demo] section")

    @property
    def n_experts(self) -> int:
        return 1 if self.method == "baseline" else self.experts

    def task_spec(self) -> TaskSpec:
        terrain = (Terrain("potholes", self.pothole_width, self.pothole_depth, self.pothole_spacing)
                   if self.task == "potholes" else Terrain())
        return TaskSpec(self.task, terrain, self.w_up, self.h_up, self.dt, self.substeps,
                        self.horizon)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


_EXPERIMENT_KEYS = {f.name: f for f in fields(ExperimentConfig) if f.name not in ("ppo", "demo")}
_PPO_KEYS = {f.name: f for f in fields(PPOConfig)}


def _convert(kind, raw: str, key: str):
    t = raw.strip()
    kind = str(kind)
    try:
        if "tuple" in kind:
            return tuple(int(v) for v in t.replace(" ", "").split(",") if v)
        if t.lower() in ("none", "off", "not used") and "None" in kind:
            return None
        if kind.startswith("bool"):
            if t.lower() in ("1", "true", "yes", "on"):
                return True
            if t.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if kind.startswith("int"):
            return int(t)
        if kind.startswith("float"):
            return float(t)
        return t
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    kw = {}
    if cp.has_section("experiment"):
        for k, v in cp.items("experiment"):
            if k not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown experiment key {k!r}")
            kw[k] = _convert(_EXPERIMENT_KEYS[k].type, v, k)
    if "task" in kw:
        key = kw["task"].lower().replace(" ", "")
        if key not in _TASK_ALIASES:
            raise ConfigError(f"unknown task {kw['task']!r}")
        kw["task"] = _TASK_ALIASES[key]
    if "method" in kw:
        kw["method"] = kw["method"].lower().replace("-", "_")
    for section in ("physics",):
        if cp.has_section(section):
            for k, v in cp.items(section):
                if k not in _EXPERIMENT_KEYS:
                    raise ConfigError(f"unknown {section} key {k!r}")
                kw[k] = _convert(_EXPERIMENT_KEYS[k].type, v, k)
    if cp.has_section("ppo"):
        pk = {}
        for k, v in cp.items("ppo"):
            if k not in _PPO_KEYS:
                raise ConfigError(f"unknown ppo key {k!r}")
            pk[k] = _convert(_PPO_KEYS[k].type, v, k)
        kw["ppo"] = PPOConfig(**pk)
    if cp.has_section("demo"):
        dk, sweep = {}, {}
        for k, v in cp.items("demo"):
            if k.startswith("sweep_"):
                sweep[k[6:]] = [None if s.strip().lower() in ("none", "off") else float(s)
                                for s in v.split(",")]
            elif k in ("restarts",):
                dk[k] = int(v)
            elif k == "budget":
                dk[k] = None if v.strip().lower() == "none" else int(v)
            elif k == "alpha":
                dk[k] = float(v)
            elif k in ("augment", "check_gate"):
                dk[k] = _convert("bool", v, k)
            elif k in ("name", "variant"):
                dk[k] = v.strip()
            else:
                raise ConfigError(f"unknown demo key {k!r}")
        kw["demo"] = DemoSettings(sweep=sweep, **dk)
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    exp = {}
    phys = {}
    for name in _EXPERIMENT_KEYS:
        v = getattr(cfg, name)
        text = ", ".join(str(s) for s in v) if isinstance(v, tuple) else str(v)
        if name in ("dt", "substeps", "w_up", "h_up", "pothole_width", "pothole_depth",
                    "pothole_spacing"):
            phys[name] = text
        else:
            exp[name] = text
    cp["experiment"] = exp
    cp["physics"] = phys
    cp["ppo"] = {k: str(getattr(cfg.ppo, k)) for k in _PPO_KEYS}
    if cfg.demo is not None:
        d = {"name": cfg.demo.name, "variant": cfg.demo.variant,
             "restarts": str(cfg.demo.restarts), "budget": str(cfg.demo.budget),
             "alpha": str(cfg.demo.alpha), "augment": str(cfg.demo.augment),
             "check_gate": str(cfg.demo.check_gate)}
        for k, vals in cfg.demo.sweep.items():
            d[f"sweep_{k}"] = ", ".join(str(v) for v in vals)
        cp["demo"] = d
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
