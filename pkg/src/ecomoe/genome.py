"""Latent design distribution and its CMA-ES update.

The default strategy is separable CMA-ES: the covariance is kept diagonal and
its learning rates are scaled up by ``(n + 2) / 3``. Setting
``full_covariance=True`` switches to the standard full-matrix update with an
eigendecomposition refreshed each generation.

Scores are "higher is better". Only the ranking of scores enters the update,
and invalid designs (``score is None`` or non-finite) are ranked below every
valid one, so any strictly increasing transform of the scores yields the same
distribution.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration or mismatched dimensions."""


@dataclass(frozen=True)
class ScoredGenotype:
    genotype: np.ndarray
    score: float | None

    @property
    def valid(self) -> bool:
        return self.score is not None and math.isfinite(self.score)


@dataclass
class DesignDistribution:
    """Gaussian search distribution ``N(mean, step^2 * C)`` over genotypes.

    ``scale`` holds ``sqrt(diag C)`` in the separable case; ``cov`` holds the
    full matrix ``C`` when ``full`` is set.
    """

    mean: np.ndarray
    step: float
    scale: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    full: bool = False
    cov: np.ndarray | None = None
    _eig: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        """Per-dimension standard deviation of the sampling distribution."""
        if self.full:
            return self.step * np.sqrt(np.diag(self.cov))
        return self.step * self.scale

    def eig(self):
        if self._eig is None:
            vals, vecs = np.linalg.eigh(self.cov)
            vals = np.maximum(vals, 1e-300)
            self._eig = (vecs, np.sqrt(vals))
        return self._eig

    def copy(self) -> "DesignDistribution":
        return DesignDistribution(
            mean=self.mean.copy(), step=self.step, scale=self.scale.copy(),
            p_sigma=self.p_sigma.copy(), p_c=self.p_c.copy(), generation=self.generation,
            full=self.full, cov=None if self.cov is None else self.cov.copy())

    def to_dict(self) -> dict:
        es = {"step": self.step, "scale": self.scale.tolist(),
              "p_sigma": self.p_sigma.tolist(), "p_c": self.p_c.tolist(),
              "full": self.full}
        if self.full:
            es["cov"] = self.cov.tolist()
        return {"dim": self.dim, "mean": self.mean.tolist(), "sigma": self.sigma.tolist(),
                "generation": self.generation, "es_state": es}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignDistribution":
        es = d["es_state"]
        full = bool(es.get("full", False))
        out = cls(mean=np.array(d["mean"], dtype=float), step=float(es["step"]),
                  scale=np.array(es["scale"], dtype=float),
                  p_sigma=np.array(es["p_sigma"], dtype=float),
                  p_c=np.array(es["p_c"], dtype=float), generation=int(d["generation"]),
                  full=full, cov=np.array(es["cov"], dtype=float) if full else None)
        if out.dim != int(d["dim"]):
            raise ConfigError("checkpoint dim does not match mean length")
        return out


def init_distribution(dim: int, prior=None, base_sigma: float = 1.0,
                      full_covariance: bool = False) -> DesignDistribution:
    """Zero mean and isotropic ``base_sigma`` unless a latent prior is given,
    in which case mean and per-dimension sigma are copied from it."""
    if dim < 1:
        raise ConfigError("latent dimension must be >= 1")
    if prior is not None:
        mean = np.array(prior.mean, dtype=float)
        scale = np.array(prior.sigma, dtype=float)
        if mean.shape != (dim,) or scale.shape != (dim,):
            raise ConfigError(f"prior dimension {mean.shape[0]} != latent dimension {dim}")
        step = 1.0
    else:
        if base_sigma <= 0:
            raise ConfigError("base_sigma must be positive")
        mean = np.zeros(dim)
        scale = np.ones(dim)
        step = float(base_sigma)
    cov = np.diag(scale ** 2) if full_covariance else None
    return DesignDistribution(mean=mean, step=step, scale=scale, p_sigma=np.zeros(dim),
                              p_c=np.zeros(dim), full=full_covariance, cov=cov)


def sample_population(dist: DesignDistribution, n: int, seed) -> list[np.ndarray]:
    if n < 1:
        raise ConfigError("population size must be >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, dist.dim))
    if dist.full:
        B, Dv = dist.eig()
        steps = (noise * Dv) @ B.T
    else:
        steps = noise * dist.scale
    return [dist.mean + dist.step * s for s in steps]


def recombination_weights(lam: int) -> np.ndarray:
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    return w / w.sum()


def rank_order(scored: list[ScoredGenotype]) -> list[int]:
    """Indices best-first; invalid last; ties keep the lower index first."""
    keyed = [(0 if s.valid else 1, -(s.score if s.valid else 0.0), i)
             for i, s in enumerate(scored)]
    return [i for *_, i in sorted(keyed)]


def cma_update(dist: DesignDistribution, scored: list[ScoredGenotype]) -> DesignDistribution:
    if len(scored) < 2:
        raise ConfigError("cma_update needs at least two scored genotypes")
    if not any(s.valid for s in scored):
        log.warning("all %d designs invalid; distribution left unchanged", len(scored))
        return dist.copy()

    n = dist.dim
    lam = len(scored)
    w = recombination_weights(lam)
    mu = w.shape[0]
    mueff = 1.0 / np.sum(w ** 2)

    c_sigma = (mueff + 2.0) / (n + mueff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mueff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mueff)
    c_mu = min(1.0 - c_1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0) ** 2 + mueff))
    if not dist.full:
        boost = (n + 2.0) / 3.0
        c_1, c_mu = min(1.0, c_1 * boost), min(1.0, c_mu * boost)
        if c_1 + c_mu > 1.0:
            tot = c_1 + c_mu
            c_1, c_mu = c_1 / tot, c_mu / tot
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    order = rank_order(scored)[:mu]
    X = np.stack([np.asarray(scored[i].genotype, dtype=float) for i in order])
    Y = (X - dist.mean) / dist.step
    y_w = w @ Y

    out = dist.copy()
    out.mean = dist.mean + dist.step * y_w

    if dist.full:
        B, Dv = dist.eig()
        inv_sqrt_y = B @ ((B.T @ y_w) / Dv)
    else:
        inv_sqrt_y = y_w / dist.scale
    out.p_sigma = (1.0 - c_sigma) * dist.p_sigma + math.sqrt(c_sigma * (2.0 - c_sigma) * mueff) * inv_sqrt_y
    g = dist.generation + 1
    ps_norm = float(np.linalg.norm(out.p_sigma))
    h_sigma = ps_norm / math.sqrt(1.0 - (1.0 - c_sigma) ** (2 * g)) < (1.4 + 2.0 / (n + 1.0)) * chi_n
    h = 1.0 if h_sigma else 0.0
    out.p_c = (1.0 - c_c) * dist.p_c + h * math.sqrt(c_c * (2.0 - c_c) * mueff) * y_w
    decay = 1.0 - c_1 - c_mu + (1.0 - h) * c_1 * c_c * (2.0 - c_c)

    if dist.full:
        rank_mu = (Y.T * w) @ Y
        cov = decay * dist.cov + c_1 * np.outer(out.p_c, out.p_c) + c_mu * rank_mu
        out.cov = 0.5 * (cov + cov.T)
        out._eig = None
        out.scale = np.sqrt(np.diag(out.cov))
    else:
        c_diag = decay * dist.scale ** 2 + c_1 * out.p_c ** 2 + c_mu * (w @ (Y ** 2))
        out.scale = np.sqrt(np.maximum(c_diag, 1e-300))

    out.step = dist.step * math.exp(min(1.0, (c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)))
    out.generation = g
    return out


def preserve_elites(prev: list[ScoredGenotype], next_pop: list[np.ndarray],
                    k: int) -> list[np.ndarray]:
    """Put the top-``k`` genotypes of ``prev`` in front of ``next_pop``,
    keeping the population size."""
    if k > len(next_pop) or k < 0:
        raise ConfigError(f"cannot preserve {k} elites in a population of {len(next_pop)}")
    if k == 0 or not prev:
        return list(next_pop)
    order = [i for i in rank_order(prev) if prev[i].valid][:k]
    elites = [np.array(prev[i].genotype, dtype=float) for i in order]
    return elites + list(next_pop[: len(next_pop) - len(elites)])
