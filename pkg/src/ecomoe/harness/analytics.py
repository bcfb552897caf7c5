"""Series derived from RunRecords: fitness curves, PCA traces, routing usage."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

COLLAPSE_THRESHOLD = 0.95


def population_mean_fitness(record: dict) -> float:
    vals = [f for f in record["fitness"] if f is not None and math.isfinite(f)]
    return float(np.mean(vals)) if vals else float("nan")


def cumulative_max_mean_fitness(records: list[dict]) -> np.ndarray:
    """Running max over generations of the population-mean raw fitness.

    Generations without a single valid design contribute nothing new; if the
    first generations all fail, the series is NaN until one succeeds.
    """
    if not records:
        raise ValueError("records must be nonempty")
    out = np.empty(len(records))
    best = -math.inf
    for i, r in enumerate(records):
        m = population_mean_fitness(r)
        if not math.isnan(m):
            best = max(best, m)
        out[i] = best if best > -math.inf else math.nan
    return out


def bootstrap_ci(values, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap of the mean; returns (mean, lo, hi)."""
    x = np.asarray(values, float)
    if x.size == 0:
        raise ValueError("need at least one value")
    mean = float(x.mean())
    if x.size == 1:
        return mean, mean, mean
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(n_resamples, x.size))
    means = x[idx].mean(axis=1)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [a, 1.0 - a])
    return mean, float(lo), float(hi)


def aggregate_curves(curves: list[np.ndarray], n_resamples: int = 1000, seed: int = 0):
    """Per-generation mean and CI over seeds (curves truncated to the shortest)."""
    n = min(len(c) for c in curves)
    M = np.stack([np.asarray(c[:n], float) for c in curves])
    rows = [bootstrap_ci(M[:, g][np.isfinite(M[:, g])], n_resamples, seed=seed)
            if np.isfinite(M[:, g]).any() else (math.nan,) * 3 for g in range(n)]
    arr = np.array(rows, float).reshape(n, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


# ------------------------------------------------------------------- PCA

def power_iteration(C: np.ndarray, n_components: int = 2, iters: int = 2000,
                    tol: float = 1e-13, seed: int = 0):
    """Leading eigenpairs of a symmetric PSD matrix via power iteration with deflation."""
    C = np.array(C, float)
    d = C.shape[0]
    rng = np.random.default_rng(seed)
    vals, vecs = [], []
    scale = max(np.trace(C), 1e-300)
    for _ in range(min(n_components, d)):
        v = rng.normal(size=d)
        for v_prev in vecs:
            v -= v_prev * (v_prev @ v)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = C @ v
            for v_prev in vecs:
                w -= v_prev * (v_prev @ w)
            nw = np.linalg.norm(w)
            if nw <= 1e-14 * scale:
                lam = 0.0
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol
            v = w
            lam = float(v @ C @ v)
            if done:
                break
        vals.append(lam)
        vecs.append(v)
        C = C - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def fix_sign(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > eps)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


@dataclass
class PCAResult:
    center: np.ndarray
    components: np.ndarray       # (2, D)
    eigenvalues: np.ndarray      # (2,)
    total_variance: float
    rank_deficient: bool

    def project(self, X) -> np.ndarray:
        return (np.atleast_2d(X) - self.center) @ self.components.T

    @property
    def explained(self) -> float:
        return float(self.eigenvalues.sum() / self.total_variance) if self.total_variance > 0 else 0.0


def pca_fit(X, rel_tol: float = 1e-10) -> PCAResult:
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] < 2:
        raise ValueError("PCA needs at least 2 points")
    center = X.mean(axis=0)
    Y = X - center
    C = Y.T @ Y / X.shape[0]
    total = float(np.trace(C))
    vals, vecs = power_iteration(C, 2)
    comps = np.zeros((2, X.shape[1]))
    lam = np.zeros(2)
    comps[:len(vals)] = [fix_sign(v) for v in vecs]
    lam[:len(vals)] = vals
    deficient = len(vals) < 2 or lam[1] <= rel_tol * max(total, 1e-300)
    if deficient:
        comps[1] = 0.0
        lam[1] = 0.0
    order = np.argsort(-lam, kind="stable")
    return PCAResult(center, comps[order], lam[order], total, bool(deficient))


def sigma_ellipse(pca: PCAResult, mean, sigma, cov=None, n: int = 48) -> np.ndarray:
    """1-sigma ellipse of N(mean, diag(sigma^2) or cov) projected into the PCA plane."""
    mean = np.asarray(mean, float)
    S = np.asarray(cov, float) if cov is not None else np.diag(np.asarray(sigma, float) ** 2)
    P = pca.components
    S2 = P @ S @ P.T
    w, V = np.linalg.eigh(S2)
    w = np.clip(w, 0.0, None)
    t = np.linspace(0.0, 2.0 * np.pi, n)
    circle = np.stack([np.cos(t), np.sin(t)], axis=1)
    return pca.project(mean)[0] + circle @ (V * np.sqrt(w)).T


def pca_project(means: list, samples: list | None = None, sigmas: list | None = None,
                pca: PCAResult | None = None) -> dict:
    """Fit (or reuse) a 2-D basis on pooled latents and project each generation."""
    means = np.atleast_2d(np.asarray(means, float))
    pooled = [means]
    if samples:
        pooled.extend(np.atleast_2d(np.asarray(s, float)) for s in samples)
    if pca is None:
        pca = pca_fit(np.concatenate(pooled))
    out = {"pca": pca, "means": pca.project(means), "ellipses": None}
    if sigmas is not None:
        out["ellipses"] = [sigma_ellipse(pca, m, s) for m, s in zip(means, sigmas)]
    return out


# --------------------------------------------------------- expert usage

def expert_usage_stats(weights_per_gen: list) -> dict:
    """Rank view and index view of gate weights, one row per generation."""
    rank_rows, index_rows = [], []
    for W in weights_per_gen:
        W = np.atleast_2d(np.asarray(W, float))
        rank_rows.append(np.sort(W, axis=1)[:, ::-1].mean(axis=0))
        index_rows.append(W.mean(axis=0))
    rank = np.array(rank_rows)
    index = np.array(index_rows)
    return {"rank": rank, "index": index,
            "collapsed": [bool(r.max() >= COLLAPSE_THRESHOLD) for r in index]}


def is_collapsed(weights, threshold: float = COLLAPSE_THRESHOLD) -> bool:
    W = np.atleast_2d(np.asarray(weights, float))
    return bool(W.mean(axis=0).max() >= threshold)


def mean_pairwise_gate_distance(weights) -> float:
    W = np.atleast_2d(np.asarray(weights, float))
    n = W.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, 1)
    d = np.linalg.norm(W[:, None, :] - W[None, :, :], axis=-1)
    return float(d[iu].mean())


# ------------------------------------------------------------- metrics

def metric_series(records: list[dict]) -> dict:
    n_eff, bias = [], []
    for r in records:
        b = r.get("best_metrics")
        n_eff.append(math.nan if not b else b["n_eff"])
        bias.append(math.nan if not b else b["mass_bias"])
    return {"n_eff": np.array(n_eff), "mass_bias": np.array(bias)}


# -------------------------------------------------------------- bundle

@dataclass
class SeedSeries:
    seed: int
    cummax: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    samples: list
    usage: dict | None
    metrics: dict


@dataclass
class AnalyticsBundle:
    label: str
    generations: int
    seeds: list[SeedSeries]
    fitness_mean: np.ndarray
    fitness_lo: np.ndarray
    fitness_hi: np.ndarray
    pca: dict | None = None
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        for s in self.seeds:
            if len(s.cummax) != self.generations:
                raise ValueError(f"seed {s.seed}: series length {len(s.cummax)} != {self.generations}")
        ok = np.isfinite(self.fitness_lo)
        if np.any(self.fitness_lo[ok] > self.fitness_mean[ok] + 1e-12) or \
                np.any(self.fitness_mean[ok] > self.fitness_hi[ok] + 1e-12):
            raise ValueError("CI bounds out of order")


def series_from_records(seed: int, records: list[dict]) -> SeedSeries:
    usage = None
    if records and records[0].get("gate_weights_per_design") is not None:
        usage = expert_usage_stats([r["gate_weights_per_design"] for r in records])
    return SeedSeries(seed, cumulative_max_mean_fitness(records),
                      np.array([r["mean"] for r in records]),
                      np.array([r["sigma"] for r in records]),
                      [np.array(r["genotypes"]) for r in records], usage, metric_series(records))


def build_bundle(run_dir, label: str | None = None, pca: PCAResult | None = None,
                 n_resamples: int = 1000) -> AnalyticsBundle:
    import json
    from .experiment import load_records, seed_dirs
    run_dir = Path(run_dir)
    series = []
    for sd in seed_dirs(run_dir):
        recs = load_records(sd)
        if recs:
            series.append(series_from_records(int(sd.name.split("_", 1)[1]), recs))
    if not series:
        raise ValueError(f"no records under {run_dir}")
    gens = min(len(s.cummax) for s in series)
    for s in series:
        _truncate(s, gens)
    mean, lo, hi = aggregate_curves([s.cummax for s in series], n_resamples)
    means = np.concatenate([s.means for s in series])
    samples = [x for s in series for x in s.samples]
    traces = pca_project(means, samples, None, pca)
    meta = {}
    mp = run_dir / f"seed_{series[0].seed}" / "meta.json"
    if mp.exists():
        meta = json.loads(mp.read_text())
    bundle = AnalyticsBundle(label or run_dir.name, gens, series, mean, lo, hi, traces, meta)
    bundle.check()
    return bundle


def _truncate(s: SeedSeries, n: int) -> None:
    s.cummax = s.cummax[:n]
    s.means = s.means[:n]
    s.sigmas = s.sigmas[:n]
    s.samples = s.samples[:n]
    if s.usage is not None:
        s.usage = {k: v[:n] for k, v in s.usage.items()}
    s.metrics = {k: v[:n] for k, v in s.metrics.items()}


def seed_traces(bundle: AnalyticsBundle, pca: PCAResult) -> dict[int, dict]:
    return {s.seed: pca_project(s.means, None, s.sigmas, pca) for s in bundle.seeds}
