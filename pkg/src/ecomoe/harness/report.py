"""CSV and SVG emission for single runs and paired comparisons."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analytics import AnalyticsBundle, build_bundle, pca_fit, seed_traces  # noqa: E402

plt.rcParams["svg.hashsalt"] = "ecomoe"
plt.rcParams["svg.fonttype"] = "none"
_SVG_META = {"Date": None, "Creator": None}


class ParityError(RuntimeError):
    """The two sides of a comparison are not on an equal footing."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _prepare(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    probe = out / ".write_test"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory {out} is not writable: {exc}") from exc
    return out


# ------------------------------------------------------------- csv views

def fitness_rows(b: AnalyticsBundle):
    for g in range(b.generations):
        yield [g] + [s.cummax[g] for s in b.seeds] + [b.fitness_mean[g], b.fitness_lo[g],
                                                      b.fitness_hi[g]]


def fitness_header(b: AnalyticsBundle) -> list[str]:
    return ["gen"] + [f"seed_{s.seed}" for s in b.seeds] + ["mean", "ci_lo", "ci_hi"]


def emit_report(bundle: AnalyticsBundle, out) -> list[Path]:
    """Write one CSV per series and line/bar SVG charts for a single run."""
    out = _prepare(out)
    files = [write_csv(out / "fitness.csv", fitness_header(bundle), fitness_rows(bundle))]

    pca = bundle.pca["pca"]
    traces = seed_traces(bundle, pca)
    rows = []
    for seed, tr in traces.items():
        for g, (p, e) in enumerate(zip(tr["means"], tr["ellipses"])):
            span = e.max(axis=0) - e.min(axis=0)
            rows.append([seed, g, p[0], p[1], span[0] / 2, span[1] / 2])
    files.append(write_csv(out / "pca.csv", ["seed", "gen", "pc1", "pc2", "half_width1",
                                             "half_width2"], rows))
    files.append(write_csv(out / "pca_basis.csv", ["component", "eigenvalue"] +
                           [f"d{i}" for i in range(pca.components.shape[1])],
                           [[i, pca.eigenvalues[i], *pca.components[i]] for i in range(2)]))

    metric_rows = []
    for s in bundle.seeds:
        for g in range(bundle.generations):
            metric_rows.append([s.seed, g, s.metrics["n_eff"][g], s.metrics["mass_bias"][g]])
    files.append(write_csv(out / "metrics.csv", ["seed", "gen", "n_eff", "mass_bias"], metric_rows))

    usage = [s for s in bundle.seeds if s.usage is not None]
    if usage:
        K = usage[0].usage["rank"].shape[1]
        urows = []
        for s in usage:
            for g in range(bundle.generations):
                urows.append([s.seed, g, *s.usage["rank"][g], *s.usage["index"][g],
                              int(s.usage["collapsed"][g])])
        files.append(write_csv(out / "expert_usage.csv",
                               ["seed", "gen"] + [f"rank_{k}" for k in range(K)] +
                               [f"index_{k}" for k in range(K)] + ["collapsed"], urows))

    files.append(_plot_fitness([bundle], out / "fitness.svg"))
    files.append(_plot_pca({bundle.label: traces}, out / "pca.svg"))
    files.append(_plot_metrics([bundle], out / "metrics.svg"))
    if usage:
        files.append(_plot_usage(bundle, out / "expert_usage.svg"))
    (out / "summary.json").write_text(json.dumps(summary(bundle), indent=2, sort_keys=True))
    files.append(out / "summary.json")
    return files


def summary(b: AnalyticsBundle) -> dict:
    return {"label": b.label, "generations": b.generations, "seeds": [s.seed for s in b.seeds],
            "final_mean": _fmt_num(b.fitness_mean[-1]), "final_ci": [_fmt_num(b.fitness_lo[-1]),
                                                                     _fmt_num(b.fitness_hi[-1])],
            "explained_variance": b.pca["pca"].explained, "rank_deficient": b.pca["pca"].rank_deficient,
            "meta": b.meta}


def _fmt_num(v):
    v = float(v)
    return None if math.isnan(v) else v


# ----------------------------------------------------------------- plots

_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:purple")


def _plot_fitness(bundles: list[AnalyticsBundle], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for b, c in zip(bundles, _COLORS):
        x = np.arange(b.generations)
        ax.plot(x, b.fitness_mean, color=c, label=b.label)
        ax.fill_between(x, b.fitness_lo, b.fitness_hi, color=c, alpha=0.25, linewidth=0)
    ax.set_xlabel("generation")
    ax.set_ylabel("cumulative max of population-mean fitness")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def _plot_pca(traces: dict[str, dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for (label, per_seed), c in zip(traces.items(), _COLORS):
        for i, (seed, tr) in enumerate(per_seed.items()):
            m = tr["means"]
            ax.plot(m[:, 0], m[:, 1], "-o", color=c, markersize=2, linewidth=1,
                    label=label if i == 0 else None)
            for e in tr["ellipses"]:
                ax.plot(e[:, 0], e[:, 1], color=c, alpha=0.15, linewidth=0.6)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def _plot_metrics(bundles: list[AnalyticsBundle], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for b, c in zip(bundles, _COLORS):
        x = np.arange(b.generations)
        for ax, key in zip(axes, ("n_eff", "mass_bias")):
            M = np.stack([s.metrics[key] for s in b.seeds])
            with np.errstate(all="ignore"):
                ax.plot(x, np.nanmean(M, axis=0) if np.isfinite(M).any() else M[0], color=c,
                        label=b.label)
    axes[0].set_ylabel("effective limb count of best design")
    axes[1].set_ylabel("mass-bias magnitude of best design")
    for ax in axes:
        ax.set_xlabel("generation")
        ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, path)


def _plot_usage(b: AnalyticsBundle, path: Path) -> Path:
    seeds = [s for s in b.seeds if s.usage is not None]
    rank = np.mean([s.usage["rank"][-1] for s in seeds], axis=0)
    index = np.mean([s.usage["index"][-1] for s in seeds], axis=0)
    K = rank.shape[0]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].bar(np.arange(K), rank, color="tab:blue")
    axes[0].set_xlabel("expert rank")
    axes[0].set_ylabel("mean routing weight")
    axes[1].bar(np.arange(K), index, color="tab:orange")
    axes[1].set_xlabel("expert index")
    for ax in axes:
        ax.set_ylim(0, 1)
        ax.set_xticks(np.arange(K))
    fig.tight_layout()
    return _save(fig, path)


# ------------------------------------------------------------ comparison

def check_parity(meta_a: dict, meta_b: dict) -> dict:
    if meta_a.get("critic_params") != meta_b.get("critic_params"):
        raise ParityError(f"critic sizes differ: {meta_a.get('critic_params')} vs "
                          f"{meta_b.get('critic_params')}")
    return {"critic_params": meta_a.get("critic_params"),
            "policy_params_a": meta_a.get("policy_params"),
            "policy_params_b": meta_b.get("policy_params"),
            "experts_a": meta_a.get("experts"), "experts_b": meta_b.get("experts")}


def compare(a, b, out=None, n_resamples: int = 1000) -> dict:
    """Paired-seed comparison of two run directories on one shared PCA basis."""
    a, b = Path(a), Path(b)
    out = _prepare(out or a.parent / f"compare_{a.name}_vs_{b.name}")
    ba = build_bundle(a, n_resamples=n_resamples)
    bb = build_bundle(b, n_resamples=n_resamples)
    parity = check_parity(ba.meta, bb.meta)
    seeds_a = [s.seed for s in ba.seeds]
    seeds_b = [s.seed for s in bb.seeds]
    paired = sorted(set(seeds_a) & set(seeds_b))
    if not paired:
        raise ParityError("the two runs share no seeds")

    pooled = np.concatenate([np.concatenate([s.means for s in x.seeds] +
                                            [g for s in x.seeds for g in s.samples])
                             for x in (ba, bb)])
    pca = pca_fit(pooled)
    traces = {ba.label: seed_traces(ba, pca), bb.label: seed_traces(bb, pca)}

    n = min(ba.generations, bb.generations)
    rows = []
    for g in range(n):
        diffs = [_seed(ba, s).cummax[g] - _seed(bb, s).cummax[g] for s in paired]
        rows.append([g, ba.fitness_mean[g], ba.fitness_lo[g], ba.fitness_hi[g],
                     bb.fitness_mean[g], bb.fitness_lo[g], bb.fitness_hi[g], float(np.mean(diffs))])
    write_csv(out / "stats.csv", ["gen", "a_mean", "a_lo", "a_hi", "b_mean", "b_lo", "b_hi",
                                  "paired_mean_diff"], rows)
    write_csv(out / "fitness_a.csv", fitness_header(ba), fitness_rows(ba))
    write_csv(out / "fitness_b.csv", fitness_header(bb), fitness_rows(bb))
    prow = []
    for label, per_seed in traces.items():
        for seed, tr in per_seed.items():
            for g, p in enumerate(tr["means"]):
                prow.append([label, seed, g, p[0], p[1]])
    write_csv(out / "pca.csv", ["run", "seed", "gen", "pc1", "pc2"], prow)
    _plot_fitness([ba, bb], out / "fitness_ci.svg")
    _plot_pca(traces, out / "pca.svg")
    _plot_metrics([ba, bb], out / "metrics.svg")

    final = [_seed(ba, s).cummax[n - 1] - _seed(bb, s).cummax[n - 1] for s in paired]
    result = {"a": ba.label, "b": bb.label, "paired_seeds": paired, "generations": n,
              "final_a": _fmt_num(ba.fitness_mean[n - 1]), "final_b": _fmt_num(bb.fitness_mean[n - 1]),
              "final_paired_diff": _fmt_num(np.mean(final)),
              "a_wins": int(sum(d > 0 for d in final)),
              "pca_explained": pca.explained, "pca_rank_deficient": pca.rank_deficient,
              **parity}
    (out / "compare.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    result["out"] = str(out)
    return result


def _seed(b: AnalyticsBundle, seed: int):
    for s in b.seeds:
        if s.seed == seed:
            return s
    raise KeyError(seed)
